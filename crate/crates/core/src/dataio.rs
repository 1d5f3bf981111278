//! Paired token-embedding datasets.
//!
//! # PAE1 file layout
//!
//! All integers are little-endian `u32`; all values little-endian IEEE-754
//! `f32`.
//!
//! ```text
//! header : "PAE1" | version=1 | d_p | d_s | count
//! record : id_len | id (UTF-8, id_len bytes)
//!          t_p | t_p × d_p values (row-major)
//!          t_s | t_s × d_s values (row-major)
//! ```
//!
//! Records follow the header back to back; nothing follows the last one.
//! Values are held as `f64` in memory and narrowed on write, so only data
//! that is already representable in `f32` round-trips bit for bit. The
//! synthetic generator rounds its output accordingly.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

pub const MAGIC: [u8; 4] = *b"PAE1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Sequence,
    Structure,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Sequence => "sequence",
            Modality::Structure => "structure",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedRecord {
    pub id: String,
    pub seq_tokens: Matrix,
    pub struct_tokens: Matrix,
}

impl PairedRecord {
    pub fn tokens(&self, modality: Modality) -> &Matrix {
        match modality {
            Modality::Sequence => &self.seq_tokens,
            Modality::Structure => &self.struct_tokens,
        }
    }
}

/// Records plus the per-modality token widths from the file header.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d_p: usize,
    pub d_s: usize,
    pub records: Vec<PairedRecord>,
}

impl Dataset {
    /// Checks widths, non-empty token matrices and id uniqueness.
    pub fn new(d_p: usize, d_s: usize, records: Vec<PairedRecord>) -> Result<Self> {
        let ds = Self { d_p, d_s, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.seq_tokens.cols() != self.d_p || r.struct_tokens.cols() != self.d_s {
                return Err(Error::Validation(format!(
                    "record {:?} has widths ({}, {}), dataset expects ({}, {})",
                    r.id,
                    r.seq_tokens.cols(),
                    r.struct_tokens.cols(),
                    self.d_p,
                    self.d_s
                )));
            }
            if r.seq_tokens.rows() == 0 || r.struct_tokens.rows() == 0 {
                return Err(Error::Validation(format!(
                    "record {:?} has no tokens",
                    r.id
                )));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate id {:?}", r.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn find(&self, id: &str) -> Option<&PairedRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Validation(format!("{what} {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_matrix(buf: &mut Vec<u8>, m: &Matrix, id: &str) -> Result<()> {
    put_u32(buf, m.rows(), "token count")?;
    for &v in m.data() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::Validation(format!(
                "record {id:?} has value {v} outside f32 range"
            )));
        }
        buf.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(())
}

/// Serialises a dataset to PAE1 bytes.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    put_u32(&mut buf, VERSION as usize, "version")?;
    put_u32(&mut buf, ds.d_p, "d_p")?;
    put_u32(&mut buf, ds.d_s, "d_s")?;
    put_u32(&mut buf, ds.records.len(), "record count")?;
    for r in &ds.records {
        put_u32(&mut buf, r.id.len(), "id length")?;
        buf.extend_from_slice(r.id.as_bytes());
        put_matrix(&mut buf, &r.seq_tokens, &r.id)?;
        put_matrix(&mut buf, &r.struct_tokens, &r.id)?;
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Corruption(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn matrix(&mut self, cols: usize, what: &str) -> Result<Matrix> {
        let rows = self.u32(what)?;
        if rows == 0 {
            return Err(Error::Format(format!("{what} has zero tokens")));
        }
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corruption(format!("{what} size overflows")))?;
        let raw = self.take(len, what)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Matrix::from_vec(rows, cols, data)
            .map_err(|_| Error::Corruption(format!("{what} contains non-finite values")))
    }
}

/// Parses PAE1 bytes.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut rd = Reader { bytes, pos: 0 };
    let magic = rd.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"PAE1\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = rd.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let d_p = rd.u32("d_p")?;
    let d_s = rd.u32("d_s")?;
    let count = rd.u32("record count")?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let id_len = rd.u32("id length")?;
        let id = std::str::from_utf8(rd.take(id_len, "id")?)
            .map_err(|_| Error::Corruption(format!("record {i} id is not UTF-8")))?
            .to_owned();
        let seq_tokens = rd.matrix(d_p, "sequence tokens")?;
        let struct_tokens = rd.matrix(d_s, "structure tokens")?;
        records.push(PairedRecord {
            id,
            seq_tokens,
            struct_tokens,
        });
    }
    if rd.pos != bytes.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after {count} records",
            bytes.len() - rd.pos
        )));
    }
    Dataset::new(d_p, d_s, records)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// Parameters of the synthetic paired-embedding generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_pairs: usize,
    pub latent_dim: usize,
    pub d_p: usize,
    pub d_s: usize,
    /// Inclusive range of token counts per record and modality.
    pub t_range: (usize, usize),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_pairs: 512,
            latent_dim: 16,
            d_p: 64,
            d_s: 32,
            t_range: (4, 12),
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::Config("n_pairs must be at least 1".into()));
        }
        if self.latent_dim == 0 || self.latent_dim > self.d_p.min(self.d_s) {
            return Err(Error::Config(format!(
                "latent_dim {} must be in 1..={}",
                self.latent_dim,
                self.d_p.min(self.d_s)
            )));
        }
        let (lo, hi) = self.t_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid token range ({lo}, {hi})")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Rounds to the nearest `f32`, which is how values are stored on disk.
fn storage(v: f64) -> f64 {
    v as f32 as f64
}

/// Planted-latent generator; see [`generate_synthetic`]. Also returns the
/// `n_pairs × latent_dim` latent matrix.
pub fn generate_synthetic_with_latents(spec: &SynthSpec) -> Result<(Dataset, Matrix)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let k = spec.latent_dim;
    let map_std = 1.0 / (k as f64).sqrt();
    let mut random_map = |rows: usize| {
        let data = (0..rows * k).map(|_| rng.normal(0.0, map_std)).collect();
        Matrix::from_vec(rows, k, data).expect("sized by construction")
    };
    let map_p = random_map(spec.d_p);
    let map_s = random_map(spec.d_s);

    let mut latents = Matrix::zeros(spec.n_pairs, k);
    let mut records = Vec::with_capacity(spec.n_pairs);
    let width = spec.n_pairs.to_string().len().max(5);
    for i in 0..spec.n_pairs {
        for v in latents.row_mut(i) {
            *v = rng.normal(0.0, 1.0);
        }
        let u = latents.row(i).to_vec();
        let mut tokens = |map: &Matrix| {
            let signal: Vec<f64> = (0..map.rows())
                .map(|r| crate::numkit::dot(map.row(r), &u))
                .collect();
            let t = rng.int_inclusive(spec.t_range.0, spec.t_range.1);
            let mut data = Vec::with_capacity(t * signal.len());
            for _ in 0..t {
                for &s in &signal {
                    let noise = if spec.noise_sigma > 0.0 {
                        rng.normal(0.0, spec.noise_sigma)
                    } else {
                        0.0
                    };
                    data.push(storage(s + noise));
                }
            }
            Matrix::from_vec(t, signal.len(), data).expect("finite by construction")
        };
        let seq_tokens = tokens(&map_p);
        let struct_tokens = tokens(&map_s);
        records.push(PairedRecord {
            id: format!("syn{i:0width$}"),
            seq_tokens,
            struct_tokens,
        });
    }
    Ok((Dataset::new(spec.d_p, spec.d_s, records)?, latents))
}

/// Draws `u_i ~ N(0, I)` per pair and fixed maps `A_P`, `A_S` with
/// `N(0, 1/latent_dim)` entries; every token row of record `i` is
/// `A·u_i` plus `N(0, noise_sigma²)` noise, rounded to `f32`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    generate_synthetic_with_latents(spec).map(|(ds, _)| ds)
}

/// Fractions of a dataset assigned to train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.75,
            val: 0.0,
            test: 0.25,
        }
    }
}

const FRACTION_SLACK: f64 = 1e-9;

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::Config(format!(
                "split fractions must be non-negative: {parts:?}"
            )));
        }
        let total: f64 = parts.iter().sum();
        if total <= 0.0 || total > 1.0 + FRACTION_SLACK {
            return Err(Error::Config(format!(
                "split fractions must sum to a value in (0, 1], got {total}"
            )));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for `n` items: val and test are floored,
    /// and train takes the rest of `floor(total · n)`.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((f * n as f64) + FRACTION_SLACK).floor() as usize;
        let n_val = floor(self.val);
        let n_test = floor(self.test);
        let total = floor(self.train + self.val + self.test).min(n);
        (total.saturating_sub(n_val + n_test), n_val, n_test)
    }
}

/// Disjoint seeded split. Items are shuffled once and cut in order.
pub fn split<T: Clone>(
    items: &[T],
    fractions: SplitFractions,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    fractions.validate()?;
    if items.is_empty() {
        return Err(Error::Validation("cannot split an empty dataset".into()));
    }
    let (n_train, n_val, n_test) = fractions.sizes(items.len());
    let mut order: Vec<usize> = (0..items.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    let pick = |range: std::ops::Range<usize>| -> Vec<T> {
        order[range].iter().map(|&i| items[i].clone()).collect()
    };
    Ok((
        pick(0..n_train),
        pick(n_train..n_train + n_val),
        pick(n_train + n_val..n_train + n_val + n_test),
    ))
}

/// Token matrices of one modality padded to a common length.
#[derive(Debug, Clone)]
pub struct PaddedTokens {
    /// One `t_max × width` matrix per batch item; padding rows are zero.
    pub tokens: Vec<Matrix>,
    /// `mask[i][j]` is true exactly when row `j` of item `i` is a real token.
    pub mask: Vec<Vec<bool>>,
}

impl PaddedTokens {
    fn build(records: &[&PairedRecord], modality: Modality) -> Self {
        let t_max = records
            .iter()
            .map(|r| r.tokens(modality).rows())
            .max()
            .unwrap_or(0);
        let mut tokens = Vec::with_capacity(records.len());
        let mut mask = Vec::with_capacity(records.len());
        for r in records {
            let m = r.tokens(modality);
            let mut data = m.data().to_vec();
            data.resize(t_max * m.cols(), 0.0);
            tokens.push(Matrix::from_vec(t_max, m.cols(), data).expect("sized by construction"));
            mask.push((0..t_max).map(|j| j < m.rows()).collect());
        }
        Self { tokens, mask }
    }
}

/// One mini-batch; item `i` of `seq` is paired with item `i` of `structure`.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub records: Vec<&'a PairedRecord>,
    pub seq: PaddedTokens,
    pub structure: PaddedTokens,
}

impl<'a> Batch<'a> {
    pub fn from_records(records: Vec<&'a PairedRecord>) -> Self {
        let seq = PaddedTokens::build(&records, Modality::Sequence);
        let structure = PaddedTokens::build(&records, Modality::Structure);
        Self {
            records,
            seq,
            structure,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn padded(&self, modality: Modality) -> &PaddedTokens {
        match modality {
            Modality::Sequence => &self.seq,
            Modality::Structure => &self.structure,
        }
    }
}

/// Shuffles with `rng` and cuts into batches of `n`; a final short batch
/// is kept.
pub fn make_batches<'a>(
    records: &'a [PairedRecord],
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Batch<'a>>> {
    if n == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if records.is_empty() {
        return Err(Error::Validation("no records to batch".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    rng.shuffle(&mut order);
    Ok(order
        .chunks(n)
        .map(|chunk| Batch::from_records(chunk.iter().map(|&i| &records[i]).collect()))
        .collect())
}
