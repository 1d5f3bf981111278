use std::io;

fn main() {
    let code = xmodal_align::cli::run(std::env::args_os(), &mut io::stdout().lock());
    std::process::exit(code);
}
