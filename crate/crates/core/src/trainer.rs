//! Mini-batch training of the two pooling heads with Adam, gradient
//! checking, and the checkpoint container.
//!
//! # Checkpoint layout (`PAC1`)
//!
//! Little-endian throughout; parameters are stored as `f64` so a reload is
//! bit-exact.
//!
//! ```text
//! "PAC1" | version:u32=1
//! loss:u8 (0 = clip, 1 = siglip) | tau:f64 | bias:f64 | bias_learnable:u8
//! dim:u32 | heads:u32 | d_p:u32 | d_s:u32
//! sequence head parameters  (f64, groups in PARAM_GROUPS order)
//! structure head parameters (f64, same order)
//! checksum:u64 (FNV-1a of every preceding byte)
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::dataio::{self, Modality, PaddedTokens, PairedRecord};
use crate::error::{Error, Result};
use crate::losses::{ClipConfig, EmbeddingBatch, LossConfig, LossOutput, SiglipConfig};
use crate::numkit::{Matrix, Rng};
use crate::projector::{ForwardTape, HeadGradients, ProjectionHead, PARAM_GROUPS};
use crate::retrieval::{self, RecallReport};

/// Records per parallel work unit. Fixed so that gradient sums are added in
/// the same order whatever the thread count.
const REDUCE_CHUNK: usize = 8;

/// Floor of the denominator in gradient-check relative errors.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moments per parameter group plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over parallel lists of parameter and
/// gradient groups. Moments start at zero on the first call.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Contract(
            "parameter and gradient groups differ in shape".into(),
        ));
    }
    if state.m.is_empty() && state.step == 0 {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len()
        || state
            .m
            .iter()
            .zip(params.iter())
            .any(|(m, p)| m.len() != p.len())
    {
        return Err(Error::Contract(
            "optimizer state does not match parameters".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[gi];
        let v = &mut state.v[gi];
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dim: usize,
    pub heads: usize,
    /// Epochs between validation evaluations.
    pub eval_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::Clip(ClipConfig::default()),
            batch_size: 64,
            epochs: 200,
            seed: 7,
            dim: 128,
            heads: 4,
            eval_every: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.adam.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 || self.dim == 0 || self.heads == 0 {
            return Err(Error::Config(
                "batch_size, eval_every, dim and heads must all be >= 1".into(),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Both pooling heads plus the loss (whose SigLIP bias may be learned).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub seq: ProjectionHead,
    pub structure: ProjectionHead,
    pub loss: LossConfig,
}

impl Model {
    pub fn init(cfg: &TrainConfig, d_p: usize, d_s: usize) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed);
        let seq = ProjectionHead::init(&mut rng, d_p, cfg.dim, cfg.heads)?;
        let structure = ProjectionHead::init(&mut rng, d_s, cfg.dim, cfg.heads)?;
        Ok(Self {
            seq,
            structure,
            loss: cfg.loss,
        })
    }

    pub fn head(&self, modality: Modality) -> &ProjectionHead {
        match modality {
            Modality::Sequence => &self.seq,
            Modality::Structure => &self.structure,
        }
    }

    fn learnable_bias(&self) -> bool {
        matches!(
            self.loss,
            LossConfig::Siglip(SiglipConfig {
                bias_learnable: true,
                ..
            })
        )
    }

    /// Loss over one batch, without gradients.
    pub fn batch_loss(&self, batch: &dataio::Batch) -> Result<f64> {
        let p = pooled_matrix(&head_forward(&self.seq, &batch.seq)?);
        let s = pooled_matrix(&head_forward(&self.structure, &batch.structure)?);
        Ok(self.loss.evaluate(&EmbeddingBatch::from_raw(p, s)?)?.value)
    }

    /// Loss and gradients for both heads over one batch.
    pub fn batch_gradients(
        &self,
        batch: &dataio::Batch,
    ) -> Result<(LossOutput, HeadGradients, HeadGradients)> {
        let seq_pass = head_forward(&self.seq, &batch.seq)?;
        let st_pass = head_forward(&self.structure, &batch.structure)?;
        let embeddings =
            EmbeddingBatch::from_raw(pooled_matrix(&seq_pass), pooled_matrix(&st_pass))?;
        let out = self.loss.evaluate(&embeddings)?;
        let g_seq = head_backward(&self.seq, &seq_pass, &out.grad_p)?;
        let g_st = head_backward(&self.structure, &st_pass, &out.grad_s)?;
        Ok((out, g_seq, g_st))
    }

    /// Sequence→structure Recall@K over `records`.
    pub fn recall(&self, records: &[PairedRecord], k_values: &[usize]) -> Result<RecallReport> {
        let q = retrieval::embed_bank(&self.seq, records, Modality::Sequence)?;
        let c = retrieval::embed_bank(&self.structure, records, Modality::Structure)?;
        retrieval::recall_at_k(&q, &c, k_values)
    }
}

fn head_forward(
    head: &ProjectionHead,
    padded: &PaddedTokens,
) -> Result<Vec<(Vec<f64>, ForwardTape)>> {
    padded
        .tokens
        .par_iter()
        .zip(&padded.mask)
        .map(|(x, m)| head.forward_masked(x, Some(m)).map(|(p, t)| (p.0, t)))
        .collect()
}

fn pooled_matrix(pass: &[(Vec<f64>, ForwardTape)]) -> Matrix {
    let d = pass.first().map_or(0, |(p, _)| p.len());
    let data = pass.iter().flat_map(|(p, _)| p.iter().copied()).collect();
    Matrix::from_vec(pass.len(), d, data).expect("pooled vectors are finite")
}

fn head_backward(
    head: &ProjectionHead,
    pass: &[(Vec<f64>, ForwardTape)],
    grad: &Matrix,
) -> Result<HeadGradients> {
    let partials: Vec<HeadGradients> = pass
        .par_chunks(REDUCE_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut g = HeadGradients::zeros_like(head);
            for (k, (_, tape)) in chunk.iter().enumerate() {
                head.backward_into(tape, grad.row(c * REDUCE_CHUNK + k), &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut total = HeadGradients::zeros_like(head);
    for g in &partials {
        total.add_assign(g);
    }
    Ok(total)
}

/// Adam state for every trainable group of a [`Model`].
#[derive(Debug, Clone, Default)]
pub struct Optimizer {
    pub cfg: AdamConfig,
    state: AdamState,
}

impl Optimizer {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            state: AdamState::default(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn step(
        &mut self,
        model: &mut Model,
        g_seq: &HeadGradients,
        g_st: &HeadGradients,
        grad_bias: Option<f64>,
    ) -> Result<()> {
        let bias_grad = [grad_bias.unwrap_or(0.0)];
        let mut grads: Vec<&[f64]> = g_seq.groups().into_iter().chain(g_st.groups()).collect();
        let learn_bias = model.learnable_bias();
        if learn_bias {
            grads.push(&bias_grad);
        }
        let Model {
            seq,
            structure,
            loss,
        } = model;
        let mut params: Vec<&mut [f64]> = seq
            .params_mut()
            .into_iter()
            .chain(structure.params_mut())
            .collect();
        let mut bias_slot = [0.0];
        if learn_bias {
            if let LossConfig::Siglip(c) = loss {
                bias_slot[0] = c.bias;
            }
            params.push(&mut bias_slot);
        }
        adam_step(&mut params, &grads, &mut self.state, &self.cfg)?;
        if let LossConfig::Siglip(c) = loss {
            if learn_bias {
                c.bias = bias_slot[0];
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Batch-size weighted mean training loss over the epoch.
    pub loss: f64,
    pub recall_at_1: Option<f64>,
    pub recall_at_5: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch with the highest validation Recall@5 (first one on ties).
    pub best_epoch: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// Loss curve as `epoch,loss,recall@1,recall@5`; missing evaluations
    /// are left empty. Wall-clock times are not included.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,recall@1,recall@5\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.17e},{},{}\n",
                e.epoch,
                e.loss,
                opt(e.recall_at_1),
                opt(e.recall_at_5)
            ));
        }
        out
    }

    /// Means of consecutive non-overlapping windows of `width` epochs; a
    /// trailing partial window is dropped.
    pub fn smoothed_losses(&self, width: usize) -> Vec<f64> {
        self.losses()
            .chunks_exact(width.max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect()
    }
}

/// Trained model and its log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
}

fn dataset_widths(train: &[PairedRecord], val: &[PairedRecord]) -> Result<(usize, usize)> {
    let first = train
        .first()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    let (d_p, d_s) = (first.seq_tokens.cols(), first.struct_tokens.cols());
    for r in train.iter().chain(val) {
        if r.seq_tokens.cols() != d_p || r.struct_tokens.cols() != d_s {
            return Err(Error::Config(format!(
                "record {:?} widths differ from ({d_p}, {d_s})",
                r.id
            )));
        }
    }
    Ok((d_p, d_s))
}

/// Trains both heads on `train`, evaluating sequence→structure Recall@1/@5
/// on `val` every `eval_every` epochs (skipped when `val` is empty), and
/// writes the final model to `checkpoint` if given.
pub fn train(
    train: &[PairedRecord],
    val: &[PairedRecord],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (d_p, d_s) = dataset_widths(train, val)?;
    let mut model = Model::init(cfg, d_p, d_s)?;
    let mut optimizer = Optimizer::new(cfg.adam);
    // Shuffling draws from its own stream so it is independent of init.
    let mut shuffle_rng = Rng::new(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut report = TrainReport::default();
    let mut best_r5 = f64::NEG_INFINITY;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let batches = dataio::make_batches(train, cfg.batch_size, &mut shuffle_rng)?;
        let mut weighted = 0.0;
        let mut seen = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let diverged = |detail: String| Error::Divergence {
                epoch,
                batch: bi,
                detail,
            };
            let (out, g_seq, g_st) = model.batch_gradients(batch).map_err(|e| match e {
                Error::NonFinite(op) => diverged(format!("non-finite value in {op}")),
                Error::DegenerateVector { norm } => {
                    diverged(format!("pooled embedding collapsed (norm {norm:e})"))
                }
                other => other,
            })?;
            if !out.value.is_finite() {
                return Err(diverged(format!("loss is {}", out.value)));
            }
            if !g_seq.is_finite()
                || !g_st.is_finite()
                || out.grad_bias.is_some_and(|b| !b.is_finite())
            {
                return Err(diverged("non-finite gradient".into()));
            }
            weighted += out.value * batch.len() as f64;
            seen += batch.len();
            optimizer.step(&mut model, &g_seq, &g_st, out.grad_bias)?;
        }
        let loss = weighted / seen as f64;

        let (mut r1, mut r5) = (None, None);
        if !val.is_empty() && epoch % cfg.eval_every == 0 {
            let rep = model.recall(val, &[1, 5])?;
            r1 = rep.at(1);
            r5 = rep.at(5);
            if let Some(r) = r5 {
                if r > best_r5 {
                    best_r5 = r;
                    report.best_epoch = Some(epoch);
                }
            }
        }
        report.epochs.push(EpochLog {
            epoch,
            loss,
            recall_at_1: r1,
            recall_at_5: r5,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }

    if let Some(path) = checkpoint {
        save_checkpoint(path, &model)?;
        report.checkpoint = Some(path.to_path_buf());
    }
    Ok(TrainOutcome { model, report })
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub loss: LossConfig,
    pub n: usize,
    pub max_tokens: usize,
    pub d_p: usize,
    pub d_s: usize,
    pub dim: usize,
    pub heads: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::Clip(ClipConfig::default()),
            n: 4,
            max_tokens: 5,
            d_p: 6,
            d_s: 5,
            dim: 16,
            heads: 4,
            step: 1e-5,
            seed: 0,
        }
    }
}

/// Worst relative error per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `(group name, max relative error, coordinates checked)`; groups are
    /// prefixed `seq.` / `structure.`, plus `bias` for a learnable bias.
    pub groups: Vec<(String, f64, usize)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.1).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the analytic gradient of the full pipeline (input projection,
/// attention, LayerNorm, normalisation, loss) against central differences
/// on every parameter coordinate of a small random problem.
///
/// The query tokens and LayerNorm affine terms are re-drawn at unit scale so
/// that attention is far from uniform and every path carries gradient.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.loss.validate()?;
    if cfg.n == 0 || cfg.max_tokens == 0 {
        return Err(Error::Config(
            "grad check needs n >= 1 and max_tokens >= 1".into(),
        ));
    }
    let mut rng = Rng::new(cfg.seed);
    let train_cfg = TrainConfig {
        loss: cfg.loss,
        dim: cfg.dim,
        heads: cfg.heads,
        seed: rng.next_u64(),
        ..TrainConfig::default()
    };
    let mut model = Model::init(&train_cfg, cfg.d_p, cfg.d_s)?;
    for head in [&mut model.seq, &mut model.structure] {
        let groups = head.params_mut();
        let [_, query, _, _, _, _, gain, bias] = groups;
        query.iter_mut().for_each(|v| *v = rng.normal(0.0, 1.0));
        gain.iter_mut().for_each(|v| *v = rng.uniform(0.5, 1.5));
        bias.iter_mut().for_each(|v| *v = rng.normal(0.0, 0.2));
    }
    let records: Vec<PairedRecord> = (0..cfg.n)
        .map(|i| {
            let mut tokens = |width: usize| {
                let t = rng.int_inclusive(1, cfg.max_tokens);
                let data = (0..t * width).map(|_| rng.normal(0.0, 1.0)).collect();
                Matrix::from_vec(t, width, data).expect("finite")
            };
            PairedRecord {
                id: format!("g{i}"),
                seq_tokens: tokens(cfg.d_p),
                struct_tokens: tokens(cfg.d_s),
            }
        })
        .collect();
    let batch = dataio::Batch::from_records(records.iter().collect());

    let (out, g_seq, g_st) = model.batch_gradients(&batch)?;
    let h = cfg.step;
    let mut groups = Vec::new();

    for (prefix, analytic) in [("seq", &g_seq), ("structure", &g_st)] {
        for (gi, name) in PARAM_GROUPS.iter().enumerate() {
            let len = analytic.groups()[gi].len();
            let mut worst: f64 = 0.0;
            for i in 0..len {
                let orig = head_mut(&mut model, prefix).params()[gi][i];
                head_mut(&mut model, prefix).params_mut()[gi][i] = orig + h;
                let up = model.batch_loss(&batch)?;
                head_mut(&mut model, prefix).params_mut()[gi][i] = orig - h;
                let down = model.batch_loss(&batch)?;
                head_mut(&mut model, prefix).params_mut()[gi][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                worst = worst.max(relative_error(analytic.groups()[gi][i], numeric));
            }
            groups.push((format!("{prefix}.{name}"), worst, len));
        }
    }

    if let (Some(analytic), LossConfig::Siglip(c)) = (out.grad_bias, cfg.loss) {
        let at = |bias: f64| -> Result<f64> {
            let mut m = model.clone();
            m.loss = LossConfig::Siglip(SiglipConfig { bias, ..c });
            m.batch_loss(&batch)
        };
        let numeric = (at(c.bias + h)? - at(c.bias - h)?) / (2.0 * h);
        groups.push(("bias".into(), relative_error(analytic, numeric), 1));
    }
    Ok(GradCheckReport { groups })
}

const CKPT_MAGIC: [u8; 4] = *b"PAC1";
const CKPT_VERSION: u32 = 1;

fn head_mut<'a>(m: &'a mut Model, prefix: &str) -> &'a mut ProjectionHead {
    if prefix == "seq" {
        &mut m.seq
    } else {
        &mut m.structure
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Serialises a model into the `PAC1` container.
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let (kind, tau, bias, learnable) = match model.loss {
        LossConfig::Clip(c) => (0u8, c.tau, 0.0, false),
        LossConfig::Siglip(c) => (1u8, c.tau, c.bias, c.bias_learnable),
    };
    buf.push(kind);
    buf.extend_from_slice(&tau.to_le_bytes());
    buf.extend_from_slice(&bias.to_le_bytes());
    buf.push(learnable as u8);
    for v in [
        model.seq.dim(),
        model.seq.heads(),
        model.seq.input_dim(),
        model.structure.input_dim(),
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for head in [&model.seq, &model.structure] {
        for group in head.params() {
            for v in group {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

/// Parses a `PAC1` container.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    const HEADER: usize = 4 + 4 + 1 + 8 + 8 + 1 + 16;
    if bytes.len() < 8 {
        return Err(Error::Corruption("checkpoint truncated".into()));
    }
    if bytes[..4] != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    if bytes.len() < HEADER + 8 {
        return Err(Error::Corruption("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let f64_at = |o: usize| f64::from_le_bytes(body[o..o + 8].try_into().expect("8 bytes"));
    let u32_at =
        |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes")) as usize;
    let kind = body[8];
    let tau = f64_at(9);
    let bias = f64_at(17);
    let learnable = body[25];
    let (dim, heads, d_p, d_s) = (u32_at(26), u32_at(30), u32_at(34), u32_at(38));

    let head_len = |d_in: usize| -> Option<usize> {
        let sq = dim.checked_mul(dim)?;
        d_in.checked_mul(dim)?
            .checked_add(sq.checked_mul(4)?)?
            .checked_add(dim.checked_mul(3)?)
    };
    let expected = head_len(d_p)
        .zip(head_len(d_s))
        .and_then(|(a, b)| a.checked_add(b))
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER));
    if expected != Some(body.len()) {
        return Err(Error::Corruption(format!(
            "checkpoint is {} bytes, header implies {}",
            bytes.len(),
            expected.map_or("an impossible size".into(), |n| (n + 8).to_string())
        )));
    }
    if fnv1a(body) != stored {
        return Err(Error::Corruption("checkpoint checksum mismatch".into()));
    }
    let loss = match (kind, learnable) {
        (0, 0) => LossConfig::Clip(ClipConfig { tau }),
        (1, l @ (0 | 1)) => LossConfig::Siglip(SiglipConfig {
            tau,
            bias,
            bias_learnable: l == 1,
        }),
        _ => {
            return Err(Error::Format(format!(
                "unknown loss tag {kind}/{learnable}"
            )))
        }
    };
    loss.validate()?;

    let mut pos = HEADER;
    let mut read_head = |d_in: usize| -> Result<ProjectionHead> {
        let lens = [
            d_in * dim,
            dim,
            dim * dim,
            dim * dim,
            dim * dim,
            dim * dim,
            dim,
            dim,
        ];
        let groups = lens
            .iter()
            .map(|&n| {
                let g: Vec<f64> = body[pos..pos + 8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                pos += 8 * n;
                g
            })
            .collect();
        ProjectionHead::from_groups(d_in, dim, heads, groups).map_err(|e| match e {
            Error::Config(m) => Error::Format(m),
            other => other,
        })
    };
    let seq = read_head(d_p)?;
    let structure = read_head(d_s)?;
    Ok(Model {
        seq,
        structure,
        loss,
    })
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
