//! The `xmodal` command line: `gen`, `train`, `eval`, `retrieve`, `ablate`.
//!
//! Every subcommand accepts `--config <file>`, a flat TOML document whose
//! keys are the long flag names with `-` replaced by `_` (see
//! [`RunConfig`]). Flags given on the command line override the file.
//! Unknown keys and unknown flags are errors.
//!
//! Output files (all under the user-named output directory):
//!
//! | file | header |
//! |------|--------|
//! | `checkpoint.bin` | `PAC1` container |
//! | `split.csv` | `id,split` |
//! | `loss_curve.csv` | `epoch,loss,recall@1,recall@5` |
//! | `recall.csv` | `k,recall` |
//! | `similarity.csv` | `id,<structure ids...>` |
//! | `embeddings.csv` | `id,modality,d0,...` |
//! | `ablation.csv` | `axis,value,status,final_loss,recall@1,recall@5,epochs_to_best,error` |

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Deserialize;

use crate::dataio::{self, Dataset, Modality, PairedRecord, SplitFractions, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::{ClipConfig, LossConfig, SiglipConfig, DEFAULT_SIGLIP_BIAS, DEFAULT_TAU};
use crate::retrieval;
use crate::trainer::{self, AdamConfig, Model, TrainConfig, TrainReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SPLIT_FILE: &str = "split.csv";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";

#[derive(Debug, Parser)]
#[command(
    name = "xmodal",
    version,
    about = "Cross-modal contrastive alignment toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset in PAE1 format
    Gen(GenArgs),
    /// Train both projection heads
    Train(TrainArgs),
    /// Evaluate Recall@K and export similarity and embedding CSVs
    Eval(EvalArgs),
    /// List the nearest structures for one sequence id
    Retrieve(RetrieveArgs),
    /// Train one model per value of a hyperparameter and tabulate results
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Clip,
    Siglip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Tau,
    Loss,
    Bias,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub run: Option<PathBuf>,
    pub pairs: Option<usize>,
    pub latent: Option<usize>,
    pub dp: Option<usize>,
    pub ds: Option<usize>,
    pub tmin: Option<usize>,
    pub tmax: Option<usize>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
    pub loss: Option<LossKind>,
    pub tau: Option<f64>,
    pub bias: Option<f64>,
    pub learn_bias: Option<bool>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub dim: Option<usize>,
    pub heads: Option<usize>,
    pub eval_every: Option<usize>,
    pub train_frac: Option<f64>,
    pub val_frac: Option<f64>,
    pub test_frac: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text)
            }
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    /// Flat TOML config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output PAE1 file
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of pairs [default: 512]
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Planted latent dimension [default: 16]
    #[arg(long)]
    pub latent: Option<usize>,
    /// Sequence token width [default: 64]
    #[arg(long)]
    pub dp: Option<usize>,
    /// Structure token width [default: 32]
    #[arg(long)]
    pub ds: Option<usize>,
    /// Minimum tokens per item [default: 4]
    #[arg(long)]
    pub tmin: Option<usize>,
    /// Maximum tokens per item [default: 12]
    #[arg(long)]
    pub tmax: Option<usize>,
    /// Token noise standard deviation [default: 0.1]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Generator seed [default: 7]
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Training options shared by `train` and `ablate`.
#[derive(Debug, Clone, Args)]
pub struct TrainOpts {
    /// Flat TOML config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input PAE1 dataset
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Contrastive objective [default: clip]
    #[arg(long, value_enum)]
    pub loss: Option<LossKind>,
    /// Temperature [default: 0.07]
    #[arg(long)]
    pub tau: Option<f64>,
    /// SigLIP bias [default: -10]
    #[arg(long, allow_hyphen_values = true)]
    pub bias: Option<f64>,
    /// Learn the SigLIP bias instead of keeping it fixed
    #[arg(long)]
    pub learn_bias: bool,
    /// Batch size [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epochs [default: 200]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Aligned embedding width [default: 128]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Epochs between validation evaluations [default: 1]
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Seed for initialisation, shuffling and the split [default: 7]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training fraction [default: 0.75]
    #[arg(long)]
    pub train_frac: Option<f64>,
    /// Validation fraction [default: 0]
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// Test fraction [default: 0.25]
    #[arg(long)]
    pub test_frac: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Flat TOML config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input PAE1 dataset
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training output directory holding checkpoint.bin and split.csv
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Checkpoint to load instead of <run>/checkpoint.bin
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Where to write CSVs [default: the run directory]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Which records to evaluate
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Comma-separated K values
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    pub k: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct RetrieveArgs {
    /// Flat TOML config file; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input PAE1 dataset
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training output directory holding checkpoint.bin and split.csv
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Checkpoint to load instead of <run>/checkpoint.bin
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Query sequence id
    #[arg(long)]
    pub id: String,
    /// Number of neighbours
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Structures searched
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Hyperparameter to sweep
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values (numbers, or clip/siglip for the loss axis)
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        required = true
    )]
    pub values: Vec<String>,
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable output to `out`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(a, out),
        Command::Train(a) => cmd_train(&a.opts, out).map(|_| ()),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Retrieve(a) => cmd_retrieve(a, out),
        Command::Ablate(a) => cmd_ablate(a, out).map(|_| ()),
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) {
    let _ = writeln!(out, "{}", line.as_ref());
}

fn required<T: Clone>(flag: &Option<T>, file: &Option<T>, name: &str) -> Result<T> {
    flag.clone()
        .or_else(|| file.clone())
        .ok_or_else(|| Error::Config(format!("--{name} is required")))
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn synth_spec(a: &GenArgs, file: &RunConfig) -> SynthSpec {
    let d = SynthSpec::default();
    SynthSpec {
        n_pairs: a.pairs.or(file.pairs).unwrap_or(d.n_pairs),
        latent_dim: a.latent.or(file.latent).unwrap_or(d.latent_dim),
        d_p: a.dp.or(file.dp).unwrap_or(d.d_p),
        d_s: a.ds.or(file.ds).unwrap_or(d.d_s),
        t_range: (
            a.tmin.or(file.tmin).unwrap_or(d.t_range.0),
            a.tmax.or(file.tmax).unwrap_or(d.t_range.1),
        ),
        noise_sigma: a.noise.or(file.noise).unwrap_or(d.noise_sigma),
        seed: a.seed.or(file.seed).unwrap_or(d.seed),
    }
}

pub fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let file = RunConfig::load(a.config.as_deref())?;
    let spec = synth_spec(a, &file);
    spec.validate()?;
    let path = required(&a.out, &file.out, "out")?;
    let ds = dataio::generate_synthetic(&spec)?;
    dataio::write_dataset(&path, &ds)?;
    say(
        out,
        format!(
            "wrote {} records (d_p={}, d_s={}) to {}",
            ds.len(),
            ds.d_p,
            ds.d_s,
            path.display()
        ),
    );
    Ok(())
}

/// Fully resolved inputs of a training run.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub data: PathBuf,
    pub out: PathBuf,
    pub train: TrainConfig,
    pub fractions: SplitFractions,
}

pub fn train_plan(a: &TrainOpts) -> Result<TrainPlan> {
    let file = RunConfig::load(a.config.as_deref())?;
    let d = TrainConfig::default();
    let tau = a.tau.or(file.tau).unwrap_or(DEFAULT_TAU);
    let loss = match a.loss.or(file.loss).unwrap_or(LossKind::Clip) {
        LossKind::Clip => LossConfig::Clip(ClipConfig { tau }),
        LossKind::Siglip => LossConfig::Siglip(SiglipConfig {
            tau,
            bias: a.bias.or(file.bias).unwrap_or(DEFAULT_SIGLIP_BIAS),
            bias_learnable: a.learn_bias || file.learn_bias.unwrap_or(false),
        }),
    };
    let train = TrainConfig {
        loss,
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        epochs: a.epochs.or(file.epochs).unwrap_or(d.epochs),
        seed: a.seed.or(file.seed).unwrap_or(d.seed),
        dim: a.dim.or(file.dim).unwrap_or(d.dim),
        heads: a.heads.or(file.heads).unwrap_or(d.heads),
        eval_every: a.eval_every.or(file.eval_every).unwrap_or(d.eval_every),
        adam: AdamConfig {
            lr: a.lr.or(file.lr).unwrap_or(d.adam.lr),
            ..d.adam
        },
    };
    train.validate()?;
    let df = SplitFractions::default();
    let fractions = SplitFractions {
        train: a.train_frac.or(file.train_frac).unwrap_or(df.train),
        val: a.val_frac.or(file.val_frac).unwrap_or(df.val),
        test: a.test_frac.or(file.test_frac).unwrap_or(df.test),
    };
    fractions.validate()?;
    let data = required(&a.data, &file.data, "data")?;
    require_file(&data)?;
    let out = required(&a.out, &file.out, "out")?;
    Ok(TrainPlan {
        data,
        out,
        train,
        fractions,
    })
}

/// Splits of a dataset as decided by a training run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<PairedRecord>,
    pub val: Vec<PairedRecord>,
    pub test: Vec<PairedRecord>,
}

impl Splits {
    pub fn compute(ds: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Self> {
        let (train, val, test) = dataio::split(&ds.records, fractions, seed)?;
        Ok(Self { train, val, test })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,split\n");
        for (name, recs) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for r in recs {
                let _ = writeln!(out, "{},{name}", r.id);
            }
        }
        out
    }

    /// Rebuilds splits from a `split.csv` written by `train`.
    pub fn from_csv(ds: &Dataset, text: &str) -> Result<Self> {
        let mut splits = Self {
            train: vec![],
            val: vec![],
            test: vec![],
        };
        for (n, line) in text.lines().enumerate().skip(1) {
            let (id, which) = line
                .rsplit_once(',')
                .ok_or_else(|| Error::Format(format!("split.csv line {}: {line:?}", n + 1)))?;
            let rec = ds
                .find(id)
                .ok_or_else(|| Error::Validation(format!("split lists unknown id {id:?}")))?
                .clone();
            match which {
                "train" => splits.train.push(rec),
                "val" => splits.val.push(rec),
                "test" => splits.test.push(rec),
                other => return Err(Error::Format(format!("unknown split {other:?}"))),
            }
        }
        Ok(splits)
    }

    pub fn select(&self, ds: &Dataset, which: SplitName) -> Vec<PairedRecord> {
        match which {
            SplitName::Train => self.train.clone(),
            SplitName::Val => self.val.clone(),
            SplitName::Test => self.test.clone(),
            SplitName::All => ds.records.clone(),
        }
    }
}

/// Result of one training run driven by the CLI.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub splits: Splits,
}

/// Trains and writes `split.csv`, `checkpoint.bin` and `loss_curve.csv`.
/// With `monitor_test` set and no validation split, per-epoch recall is
/// tracked on the test split instead (evaluation does not affect training).
fn train_into(
    plan: &TrainPlan,
    ds: &Dataset,
    out_dir: &Path,
    monitor_test: bool,
) -> Result<RunOutcome> {
    create_dir(out_dir)?;
    let splits = Splits::compute(ds, plan.fractions, plan.train.seed)?;
    write_text(&out_dir.join(SPLIT_FILE), &splits.to_csv())?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let monitor = if monitor_test && splits.val.is_empty() {
        &splits.test
    } else {
        &splits.val
    };
    let outcome = trainer::train(&splits.train, monitor, &plan.train, Some(&ckpt))?;
    write_text(&out_dir.join(LOSS_CURVE_FILE), &outcome.report.to_csv())?;
    Ok(RunOutcome {
        model: outcome.model,
        report: outcome.report,
        splits,
    })
}

pub fn cmd_train(a: &TrainOpts, out: &mut dyn Write) -> Result<RunOutcome> {
    let plan = train_plan(a)?;
    let ds = dataio::read_dataset(&plan.data)?;
    let run = train_into(&plan, &ds, &plan.out, false)?;
    let losses = run.report.losses();
    say(
        out,
        format!(
            "trained {} epochs on {} pairs ({} loss, tau={})",
            losses.len(),
            run.splits.train.len(),
            plan.train.loss.name(),
            plan.train.loss.tau()
        ),
    );
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        say(
            out,
            format!("loss: first epoch {first:.6}, last epoch {last:.6}"),
        );
    }
    say(out, format!("outputs in {}", plan.out.display()));
    Ok(run)
}

struct Loaded {
    ds: Dataset,
    model: Model,
    splits: Splits,
}

fn load_run(
    data: &Option<PathBuf>,
    run: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    file: &RunConfig,
) -> Result<(Loaded, Option<PathBuf>)> {
    let data = required(data, &file.data, "data")?;
    require_file(&data)?;
    let run_dir = run.clone().or_else(|| file.run.clone());
    let ckpt = match (checkpoint, &run_dir) {
        (Some(c), _) => c.clone(),
        (None, Some(r)) => r.join(CHECKPOINT_FILE),
        (None, None) => return Err(Error::Config("--run or --checkpoint is required".into())),
    };
    require_file(&ckpt)?;
    let ds = dataio::read_dataset(&data)?;
    let model = trainer::load_checkpoint(&ckpt)?;
    if model.seq.input_dim() != ds.d_p || model.structure.input_dim() != ds.d_s {
        return Err(Error::Config(format!(
            "checkpoint expects widths ({}, {}), dataset has ({}, {})",
            model.seq.input_dim(),
            model.structure.input_dim(),
            ds.d_p,
            ds.d_s
        )));
    }
    let splits = match &run_dir {
        Some(r) if r.join(SPLIT_FILE).is_file() => {
            let p = r.join(SPLIT_FILE);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Splits::from_csv(&ds, &text)?
        }
        // without a split file every record counts as test
        _ => Splits {
            train: vec![],
            val: vec![],
            test: ds.records.clone(),
        },
    };
    Ok((Loaded { ds, model, splits }, run_dir))
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let file = RunConfig::load(a.config.as_deref())?;
    let (loaded, run_dir) = load_run(&a.data, &a.run, &a.checkpoint, &file)?;
    let out_dir = a
        .out
        .clone()
        .or(run_dir)
        .ok_or_else(|| Error::Config("--out is required with --checkpoint".into()))?;
    create_dir(&out_dir)?;
    let records = loaded.splits.select(&loaded.ds, a.split);
    let queries = retrieval::embed_bank(&loaded.model.seq, &records, Modality::Sequence)?;
    let corpus = retrieval::embed_bank(&loaded.model.structure, &records, Modality::Structure)?;
    let report = retrieval::recall_at_k(&queries, &corpus, &a.k)?;
    for (k, r) in report.k_values.iter().zip(&report.recall) {
        say(out, format!("Recall@{k}: {}", pct(*r)));
    }
    write_text(&out_dir.join("recall.csv"), &report.to_csv())?;
    let summary = retrieval::export_similarity(&queries, &corpus, &out_dir.join("similarity.csv"))?;
    say(out, summary.line());
    retrieval::export_embeddings(&[&queries, &corpus], &out_dir.join("embeddings.csv"))?;
    Ok(())
}

pub fn cmd_retrieve(a: &RetrieveArgs, out: &mut dyn Write) -> Result<()> {
    let file = RunConfig::load(a.config.as_deref())?;
    let (loaded, _) = load_run(&a.data, &a.run, &a.checkpoint, &file)?;
    let query = loaded
        .ds
        .find(&a.id)
        .ok_or_else(|| Error::Validation(format!("unknown id {:?}", a.id)))?;
    let records = loaded.splits.select(&loaded.ds, a.split);
    let corpus = retrieval::embed_bank(&loaded.model.structure, &records, Modality::Structure)?;
    if corpus.is_empty() {
        return Err(Error::Validation("the selected split is empty".into()));
    }
    if a.k > corpus.len() {
        eprintln!(
            "warning: k={} exceeds corpus size {}; showing all",
            a.k,
            corpus.len()
        );
    }
    let q = loaded.model.seq.embed(&query.seq_tokens, None)?;
    for (rank, (id, score)) in retrieval::top_k(q.as_slice(), &corpus, a.k)?
        .into_iter()
        .enumerate()
    {
        say(out, format!("{}\t{id}\t{score:.6}", rank + 1));
    }
    Ok(())
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub final_loss: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub recall_at_5: Option<f64>,
    pub epochs_to_best: Option<usize>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let axis = match self.axis {
            Axis::Tau => "tau",
            Axis::Loss => "loss",
            Axis::Bias => "bias",
        };
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut out =
            String::from("axis,value,status,final_loss,recall@1,recall@5,epochs_to_best,error\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{axis},{},{},{},{},{},{},{}",
                r.value,
                if r.ok() { "ok" } else { "failed" },
                f(r.final_loss),
                f(r.recall_at_1),
                f(r.recall_at_5),
                r.epochs_to_best.map_or(String::new(), |e| e.to_string()),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            );
        }
        out
    }
}

fn parse_number(axis: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("{axis} value {v:?} is not a number")))
}

/// Applies one sweep value to the base plan.
fn sweep_point(base: &TrainPlan, axis: Axis, value: &str) -> Result<TrainPlan> {
    let mut plan = base.clone();
    let tau = base.train.loss.tau();
    plan.train.loss = match axis {
        Axis::Tau => {
            let tau = parse_number("tau", value)?;
            match base.train.loss {
                LossConfig::Clip(_) => LossConfig::Clip(ClipConfig { tau }),
                LossConfig::Siglip(c) => LossConfig::Siglip(SiglipConfig { tau, ..c }),
            }
        }
        Axis::Bias => {
            let bias = parse_number("bias", value)?;
            let learnable = matches!(
                base.train.loss,
                LossConfig::Siglip(SiglipConfig {
                    bias_learnable: true,
                    ..
                })
            );
            LossConfig::Siglip(SiglipConfig {
                tau,
                bias,
                bias_learnable: learnable,
            })
        }
        Axis::Loss => match value.trim() {
            "clip" => LossConfig::Clip(ClipConfig { tau }),
            "siglip" => match base.train.loss {
                LossConfig::Siglip(c) => LossConfig::Siglip(c),
                LossConfig::Clip(_) => LossConfig::Siglip(SiglipConfig {
                    tau,
                    ..SiglipConfig::default()
                }),
            },
            other => return Err(Error::Config(format!("unknown loss {other:?}"))),
        },
    };
    plan.train.validate()?;
    Ok(plan)
}

/// Ablation sweep: every value is trained independently on the same data
/// and split, each in its own subdirectory. A failing point becomes a
/// `failed` row; the sweep continues.
pub fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<AblationTable> {
    if a.values.len() < 2 {
        return Err(Error::Config(
            "an ablation needs at least two values".into(),
        ));
    }
    let base = train_plan(&a.opts)?;
    let ds = dataio::read_dataset(&base.data)?;
    create_dir(&base.out)?;
    let axis_name = format!("{:?}", a.axis).to_lowercase();

    let rows: Vec<AblationRow> = a
        .values
        .par_iter()
        .map(|value| {
            let attempt = || -> Result<AblationRow> {
                let plan = sweep_point(&base, a.axis, value)?;
                let dir = base.out.join(format!("{axis_name}_{}", value.trim()));
                let run = train_into(&plan, &ds, &dir, true)?;
                let test = run.model.recall(&run.splits.test, &[1, 5])?;
                Ok(AblationRow {
                    value: value.trim().to_string(),
                    final_loss: run.report.losses().last().copied(),
                    recall_at_1: test.at(1),
                    recall_at_5: test.at(5),
                    epochs_to_best: run.report.best_epoch,
                    error: None,
                })
            };
            attempt().unwrap_or_else(|e| AblationRow {
                value: value.trim().to_string(),
                final_loss: None,
                recall_at_1: None,
                recall_at_5: None,
                epochs_to_best: None,
                error: Some(e.to_string()),
            })
        })
        .collect();

    let table = AblationTable { axis: a.axis, rows };
    write_text(&base.out.join("ablation.csv"), &table.to_csv())?;
    for r in &table.rows {
        match &r.error {
            None => say(
                out,
                format!(
                    "{axis_name}={}: loss {:.6}  R@1 {}  R@5 {}",
                    r.value,
                    r.final_loss.unwrap_or(f64::NAN),
                    pct(r.recall_at_1.unwrap_or(0.0)),
                    pct(r.recall_at_5.unwrap_or(0.0))
                ),
            ),
            Some(e) => say(out, format!("{axis_name}={}: FAILED ({e})", r.value)),
        }
    }
    Ok(table)
}
