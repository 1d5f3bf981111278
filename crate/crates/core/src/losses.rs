//! In-batch contrastive objectives over pooled embeddings.
//!
//! Row `i` of `p` (sequence side) is the positive partner of row `i` of `s`
//! (structure side); every other pairing in the batch is a negative.
//! Gradients are taken with respect to the raw entries of `p` and `s`.

use crate::error::{Error, Result};
use crate::numkit::{self, CompensatedSum, Matrix};

/// Temperature used when none is configured.
pub const DEFAULT_TAU: f64 = 0.07;

/// SigLIP bias used when none is configured.
pub const DEFAULT_SIGLIP_BIAS: f64 = -10.0;

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    p: Matrix,
    s: Matrix,
}

impl EmbeddingBatch {
    /// Batch of unit-norm rows.
    pub fn new(p: Matrix, s: Matrix) -> Result<Self> {
        let batch = Self::from_raw(p, s)?;
        for (name, m) in [("p", &batch.p), ("s", &batch.s)] {
            for i in 0..m.rows() {
                let n = numkit::norm(m.row(i));
                if (n - 1.0).abs() > UNIT_TOL {
                    return Err(Error::Validation(format!(
                        "row {i} of {name} has norm {n}, expected 1"
                    )));
                }
            }
        }
        Ok(batch)
    }

    /// Batch without the unit-norm check; losses are defined for any rows.
    pub fn from_raw(p: Matrix, s: Matrix) -> Result<Self> {
        if p.shape() != s.shape() {
            return Err(Error::Shape(format!(
                "p is {:?} but s is {:?}",
                p.shape(),
                s.shape()
            )));
        }
        if p.rows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(Self { p, s })
    }

    pub fn len(&self) -> usize {
        self.p.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.p.rows() == 0
    }

    pub fn p(&self) -> &Matrix {
        &self.p
    }

    pub fn s(&self) -> &Matrix {
        &self.s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    pub tau: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiglipConfig {
    pub tau: f64,
    pub bias: f64,
    pub bias_learnable: bool,
}

impl Default for SiglipConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            bias: DEFAULT_SIGLIP_BIAS,
            bias_learnable: false,
        }
    }
}

/// Loss selector with its constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossConfig {
    Clip(ClipConfig),
    Siglip(SiglipConfig),
}

impl LossConfig {
    pub fn tau(&self) -> f64 {
        match self {
            LossConfig::Clip(c) => c.tau,
            LossConfig::Siglip(c) => c.tau,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossConfig::Clip(_) => "clip",
            LossConfig::Siglip(_) => "siglip",
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau())?;
        if let LossConfig::Siglip(c) = self {
            if !c.bias.is_finite() {
                return Err(Error::Config(format!(
                    "bias must be finite, got {}",
                    c.bias
                )));
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, batch: &EmbeddingBatch) -> Result<LossOutput> {
        match self {
            LossConfig::Clip(c) => clip_loss(batch, c),
            LossConfig::Siglip(c) => siglip_loss(batch, c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_p: Matrix,
    pub grad_s: Matrix,
    /// `∂L/∂b`; `Some` only for SigLIP with a learnable bias.
    pub grad_bias: Option<f64>,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// All-pairs dot products `P_i · S_j`, which are cosine similarities for
/// unit rows.
pub fn similarity_matrix(batch: &EmbeddingBatch) -> Result<Matrix> {
    numkit::matmul_transpose_b(&batch.p, &batch.s)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Symmetric softmax cross-entropy over the rows and columns of `P Sᵀ / τ`,
/// each direction weighted `1 / 2N`.
pub fn clip_loss(batch: &EmbeddingBatch, cfg: &ClipConfig) -> Result<LossOutput> {
    check_tau(cfg.tau)?;
    let n = batch.len();
    let mut logits = similarity_matrix(batch)?;
    for v in logits.data_mut() {
        *v /= cfg.tau;
    }
    let row_lse: Vec<f64> = (0..n)
        .map(|i| log_sum_exp(logits.row(i).iter().copied()))
        .collect();
    let col_lse: Vec<f64> = (0..n)
        .map(|j| log_sum_exp((0..n).map(|i| logits.get(i, j))))
        .collect();
    let weight = 1.0 / (2.0 * n as f64);
    let mut value = 0.0;
    for i in 0..n {
        value += (row_lse[i] - logits.get(i, i)) + (col_lse[i] - logits.get(i, i));
    }
    value *= weight;

    // ∂L/∂logit_ij = (softmax_row_i[j] + softmax_col_j[i] − 2·[i=j]) / 2N
    let mut dlogits = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let l = logits.get(i, j);
            let mut g = (l - row_lse[i]).exp() + (l - col_lse[j]).exp();
            if i == j {
                g -= 2.0;
            }
            dlogits.set(i, j, g * weight / cfg.tau);
        }
    }
    finish(value, &dlogits, batch, None, "clip_loss")
}

/// `log σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise sigmoid loss `−(1/N) Σ_ij log σ(y_ij (P_i·S_j / τ − b))` with
/// `y_ij = +1` on the diagonal and `−1` elsewhere. The double sum is divided
/// by `N`, not `N²`.
pub fn siglip_loss(batch: &EmbeddingBatch, cfg: &SiglipConfig) -> Result<LossOutput> {
    check_tau(cfg.tau)?;
    if !cfg.bias.is_finite() {
        return Err(Error::Config(format!(
            "bias must be finite, got {}",
            cfg.bias
        )));
    }
    let n = batch.len();
    let sim = similarity_matrix(batch)?;
    let inv_n = 1.0 / n as f64;
    // N² terms of similar size: plain summation drifts visibly by N = 64
    let mut value = CompensatedSum::default();
    let mut grad_bias = 0.0;
    let mut dsim = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let y = if i == j { 1.0 } else { -1.0 };
            let margin = y * (sim.get(i, j) / cfg.tau - cfg.bias);
            value.add(-log_sigmoid(margin));
            // d(−log σ(m))/dm = −σ(−m)
            let dm = -sigmoid(-margin) * inv_n;
            dsim.set(i, j, dm * y / cfg.tau);
            grad_bias -= dm * y;
        }
    }
    let value = value.value() * inv_n;
    let grad_bias = cfg.bias_learnable.then_some(grad_bias);
    finish(value, &dsim, batch, grad_bias, "siglip_loss")
}

/// Chains `∂L/∂(P Sᵀ)` to `∂L/∂P = G S` and `∂L/∂S = Gᵀ P`.
fn finish(
    value: f64,
    dsim: &Matrix,
    batch: &EmbeddingBatch,
    grad_bias: Option<f64>,
    op: &'static str,
) -> Result<LossOutput> {
    if !value.is_finite() {
        return Err(Error::NonFinite(op));
    }
    let grad_p = numkit::matmul(dsim, &batch.s)?;
    let grad_s = numkit::matmul(&dsim.transpose(), &batch.p)?;
    Ok(LossOutput {
        value,
        grad_p,
        grad_s,
        grad_bias,
    })
}
