//! Attention pooling head.
//!
//! One learnable query token attends over a variable-length sequence of
//! token embeddings with `L` heads, the concatenated head outputs go
//! through an output projection and LayerNorm, and the result is scaled to
//! unit length:
//!
//! ```text
//! h      = X · W_in                           (t × D)
//! q      = z_Q · W_q                          (D)
//! a_l    = softmax(q_l · (h W_k)_lᵀ / √D)     per head l, over tokens
//! o_l    = a_l · (h W_v)_l                    (D / L)
//! y      = [o_1 … o_L] · W_o
//! out    = normalize(LN(y))
//! ```
//!
//! The logit scale is `√D` for every head, not the per-head `√(D/L)`.
//!
//! Per head the keys are never materialised: `q_l · (h_j W_k)_l` equals
//! `h_j · (W_k,l q_l)`, and the pooled value `Σ_j a_j (h_j W_v)_l` equals
//! `(Σ_j a_j h_j) W_v,l`, which keeps the cost of a token linear in `D`.

use crate::error::{Error, Result};
use crate::numkit::{self, axpy, dot, LayerNormCache, Matrix, Rng};

/// LayerNorm epsilon used by every head.
pub const LN_EPS: f64 = 1e-5;

/// Std-dev of the query token at initialisation.
pub const QUERY_INIT_STD: f64 = 0.02;

/// One modality's token matrix (`t × D_in`) for a single item.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    pub id: String,
    pub tokens: Matrix,
}

/// Unit-length pooled vector of width `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding(pub Vec<f64>);

impl PooledEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Names of the parameter groups, in the canonical order used by
/// [`ProjectionHead::params`], [`HeadGradients::groups`] and checkpoints.
pub const PARAM_GROUPS: [&str; 8] = [
    "input_proj",
    "query_token",
    "wq",
    "wk",
    "wv",
    "wo",
    "ln_gain",
    "ln_bias",
];

#[derive(Debug, Clone)]
pub struct ProjectionHead {
    input_proj: Matrix,
    query_token: Vec<f64>,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ln_gain: Vec<f64>,
    ln_bias: Vec<f64>,
    heads: usize,
    dim: usize,
    // Bumped on every mutable parameter access so tapes can detect staleness.
    generation: u64,
}

/// Equality of architecture and parameters; the staleness counter is
/// bookkeeping and is ignored.
impl PartialEq for ProjectionHead {
    fn eq(&self, other: &Self) -> bool {
        self.heads == other.heads && self.dim == other.dim && self.params() == other.params()
    }
}

/// Gradient buffers mirroring [`ProjectionHead`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub input_proj: Matrix,
    pub query_token: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

/// Activations from one forward pass, consumed by [`ProjectionHead::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    generation: u64,
    x: Matrix,
    mask: Option<Vec<bool>>,
    h: Matrix,
    q: Vec<f64>,
    /// Per head: `W_k,l q_l`, length `D`.
    key_query: Vec<Vec<f64>>,
    /// Per head: attention weights over tokens.
    attn: Vec<Vec<f64>>,
    /// Per head: `Σ_j a_j h_j`, length `D`.
    pooled_hidden: Vec<Vec<f64>>,
    concat: Vec<f64>,
    ln: LayerNormCache,
    ln_out_norm: f64,
    out: Vec<f64>,
}

impl ForwardTape {
    pub fn attention(&self) -> &[Vec<f64>] {
        &self.attn
    }

    /// Output of the LayerNorm, before unit scaling.
    pub fn pre_normalize(&self) -> Vec<f64> {
        self.out.iter().map(|v| v * self.ln_out_norm).collect()
    }
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("sized by construction")
}

impl ProjectionHead {
    /// Glorot-uniform projections, `N(0, 0.02²)` query token, identity LayerNorm.
    pub fn init(rng: &mut Rng, d_in: usize, dim: usize, heads: usize) -> Result<Self> {
        check_dims(d_in, dim, heads)?;
        let input_proj = glorot(rng, d_in, dim);
        let wq = glorot(rng, dim, dim);
        let wk = glorot(rng, dim, dim);
        let wv = glorot(rng, dim, dim);
        let wo = glorot(rng, dim, dim);
        let query_token = (0..dim).map(|_| rng.normal(0.0, QUERY_INIT_STD)).collect();
        Ok(Self {
            input_proj,
            query_token,
            wq,
            wk,
            wv,
            wo,
            ln_gain: vec![1.0; dim],
            ln_bias: vec![0.0; dim],
            heads,
            dim,
            generation: 0,
        })
    }

    /// Rebuilds a head from parameter groups in [`PARAM_GROUPS`] order.
    pub fn from_groups(
        d_in: usize,
        dim: usize,
        heads: usize,
        groups: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_dims(d_in, dim, heads)?;
        let expected = group_lengths(d_in, dim);
        if groups.len() != expected.len()
            || groups.iter().zip(&expected).any(|(g, &n)| g.len() != n)
        {
            return Err(Error::Shape(
                "parameter groups do not match head dimensions".into(),
            ));
        }
        let mut it = groups.into_iter();
        let mut next = || it.next().expect("length checked");
        let input_proj = Matrix::from_vec(d_in, dim, next())?;
        let query_token = next();
        let wq = Matrix::from_vec(dim, dim, next())?;
        let wk = Matrix::from_vec(dim, dim, next())?;
        let wv = Matrix::from_vec(dim, dim, next())?;
        let wo = Matrix::from_vec(dim, dim, next())?;
        let ln_gain = next();
        let ln_bias = next();
        if query_token
            .iter()
            .chain(&ln_gain)
            .chain(&ln_bias)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("ProjectionHead::from_groups"));
        }
        Ok(Self {
            input_proj,
            query_token,
            wq,
            wk,
            wv,
            wo,
            ln_gain,
            ln_bias,
            heads,
            dim,
            generation: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_width(&self) -> usize {
        self.dim / self.heads
    }

    pub fn input_dim(&self) -> usize {
        self.input_proj.rows()
    }

    pub fn query_token(&self) -> &[f64] {
        &self.query_token
    }

    pub fn ln_gain(&self) -> &[f64] {
        &self.ln_gain
    }

    pub fn ln_bias(&self) -> &[f64] {
        &self.ln_bias
    }

    pub fn num_params(&self) -> usize {
        group_lengths(self.input_dim(), self.dim).iter().sum()
    }

    /// Parameter groups in [`PARAM_GROUPS`] order.
    pub fn params(&self) -> [&[f64]; 8] {
        [
            self.input_proj.data(),
            &self.query_token,
            self.wq.data(),
            self.wk.data(),
            self.wv.data(),
            self.wo.data(),
            &self.ln_gain,
            &self.ln_bias,
        ]
    }

    /// Mutable parameter groups. Invalidates every outstanding tape.
    pub fn params_mut(&mut self) -> [&mut [f64]; 8] {
        self.generation += 1;
        [
            self.input_proj.data_mut(),
            &mut self.query_token,
            self.wq.data_mut(),
            self.wk.data_mut(),
            self.wv.data_mut(),
            self.wo.data_mut(),
            &mut self.ln_gain,
            &mut self.ln_bias,
        ]
    }

    /// Pools a full (unpadded) token matrix.
    pub fn forward(&self, x: &TokenEmbeddings) -> Result<(PooledEmbedding, ForwardTape)> {
        self.forward_masked(&x.tokens, None)
    }

    /// Pools a token matrix whose rows with `mask[j] == false` are padding.
    /// Padding rows receive exactly zero attention and contribute nothing.
    pub fn forward_masked(
        &self,
        tokens: &Matrix,
        mask: Option<&[bool]>,
    ) -> Result<(PooledEmbedding, ForwardTape)> {
        let (t, d_in) = tokens.shape();
        if d_in != self.input_dim() {
            return Err(Error::Shape(format!(
                "token width {d_in} but head expects {}",
                self.input_dim()
            )));
        }
        if t == 0 {
            return Err(Error::Shape("token matrix has no rows".into()));
        }
        if let Some(m) = mask {
            if m.len() != t {
                return Err(Error::Shape(format!(
                    "mask length {} for {t} tokens",
                    m.len()
                )));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::DegenerateMask);
            }
        }
        let live = |j: usize| mask.is_none_or(|m| m[j]);
        let d = self.dim;
        let dh = self.head_width();
        let scale = 1.0 / (d as f64).sqrt();

        let mut h = Matrix::zeros(t, d);
        for j in (0..t).filter(|&j| live(j)) {
            let hj = h.row_mut(j);
            for (k, &xv) in tokens.row(j).iter().enumerate() {
                axpy(xv, self.input_proj.row(k), hj);
            }
        }

        let mut q = vec![0.0; d];
        for (r, &zq) in self.query_token.iter().enumerate() {
            axpy(zq, self.wq.row(r), &mut q);
        }

        let mut key_query = Vec::with_capacity(self.heads);
        let mut attn = Vec::with_capacity(self.heads);
        let mut pooled_hidden = Vec::with_capacity(self.heads);
        let mut concat = vec![0.0; d];
        for l in 0..self.heads {
            let cols = l * dh..(l + 1) * dh;
            let kq: Vec<f64> = (0..d)
                .map(|r| dot(&self.wk.row(r)[cols.clone()], &q[cols.clone()]))
                .collect();
            let logits: Vec<f64> = (0..t)
                .map(|j| {
                    if live(j) {
                        dot(h.row(j), &kq) * scale
                    } else {
                        0.0
                    }
                })
                .collect();
            let a = numkit::softmax_row(&logits, mask)?;
            let mut hbar = vec![0.0; d];
            for j in (0..t).filter(|&j| live(j)) {
                axpy(a[j], h.row(j), &mut hbar);
            }
            for (r, &hb) in hbar.iter().enumerate() {
                axpy(hb, &self.wv.row(r)[cols.clone()], &mut concat[cols.clone()]);
            }
            key_query.push(kq);
            attn.push(a);
            pooled_hidden.push(hbar);
        }

        let mut y = vec![0.0; d];
        for (r, &c) in concat.iter().enumerate() {
            axpy(c, self.wo.row(r), &mut y);
        }
        let (z, ln) = numkit::layer_norm_cached(&y, &self.ln_gain, &self.ln_bias, LN_EPS)?;
        let ln_out_norm = numkit::norm(&z);
        let out = numkit::l2_normalize(&z)?;

        let tape = ForwardTape {
            generation: self.generation,
            x: tokens.clone(),
            mask: mask.map(<[bool]>::to_vec),
            h,
            q,
            key_query,
            attn,
            pooled_hidden,
            concat,
            ln,
            ln_out_norm,
            out: out.clone(),
        };
        Ok((PooledEmbedding(out), tape))
    }

    /// Forward pass without keeping activations.
    pub fn embed(&self, tokens: &Matrix, mask: Option<&[bool]>) -> Result<PooledEmbedding> {
        self.forward_masked(tokens, mask).map(|(p, _)| p)
    }

    /// Gradients of a scalar loss with respect to every parameter, given
    /// `grad_out = ∂loss/∂output` for the output produced with `tape`.
    pub fn backward(&self, tape: &ForwardTape, grad_out: &[f64]) -> Result<HeadGradients> {
        let mut grads = HeadGradients::zeros_like(self);
        self.backward_into(tape, grad_out, &mut grads)?;
        Ok(grads)
    }

    /// Like [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(
        &self,
        tape: &ForwardTape,
        grad_out: &[f64],
        grads: &mut HeadGradients,
    ) -> Result<()> {
        if tape.generation != self.generation
            || tape.x.cols() != self.input_dim()
            || tape.out.len() != self.dim
        {
            return Err(Error::Contract(
                "tape was not produced by this head's current parameters".into(),
            ));
        }
        if grad_out.len() != self.dim {
            return Err(Error::Shape(format!(
                "grad_out length {} for head width {}",
                grad_out.len(),
                self.dim
            )));
        }
        if !grads.matches(self) {
            return Err(Error::Contract("gradient buffer shape mismatch".into()));
        }
        let d = self.dim;
        let dh = self.head_width();
        let scale = 1.0 / (d as f64).sqrt();
        let t = tape.x.rows();
        let live = |j: usize| tape.mask.as_ref().is_none_or(|m| m[j]);

        // out = z / ‖z‖
        let proj = dot(&tape.out, grad_out);
        let dz: Vec<f64> = grad_out
            .iter()
            .zip(&tape.out)
            .map(|(g, o)| (g - o * proj) / tape.ln_out_norm)
            .collect();

        // z = gain ⊙ x̂ + bias
        let xhat = &tape.ln.normalized;
        let mut dxhat = vec![0.0; d];
        for i in 0..d {
            grads.ln_gain[i] += dz[i] * xhat[i];
            grads.ln_bias[i] += dz[i];
            dxhat[i] = dz[i] * self.ln_gain[i];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xhat) / d as f64;
        let dy: Vec<f64> = (0..d)
            .map(|i| tape.ln.inv_std * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat))
            .collect();

        // y = concat · W_o
        let mut dconcat = vec![0.0; d];
        for r in 0..d {
            axpy(tape.concat[r], &dy, grads.wo.row_mut(r));
            dconcat[r] = dot(self.wo.row(r), &dy);
        }

        let mut dh_mat = Matrix::zeros(t, d);
        let mut dq = vec![0.0; d];
        for l in 0..self.heads {
            let cols = l * dh..(l + 1) * dh;
            let a = &tape.attn[l];
            let hbar = &tape.pooled_hidden[l];
            let kq = &tape.key_query[l];
            let dout = &dconcat[cols.clone()];

            // o_l = hbar · W_v[:, cols]
            let mut dhbar = vec![0.0; d];
            for r in 0..d {
                axpy(hbar[r], dout, &mut grads.wv.row_mut(r)[cols.clone()]);
                dhbar[r] = dot(&self.wv.row(r)[cols.clone()], dout);
            }

            // hbar = Σ_j a_j h_j
            let da: Vec<f64> = (0..t)
                .map(|j| {
                    if live(j) {
                        dot(tape.h.row(j), &dhbar)
                    } else {
                        0.0
                    }
                })
                .collect();
            let expected = dot(a, &da);
            let mut dkq = vec![0.0; d];
            for j in (0..t).filter(|&j| live(j)) {
                let dlogit = a[j] * (da[j] - expected) * scale;
                let dhj = dh_mat.row_mut(j);
                axpy(a[j], &dhbar, dhj);
                axpy(dlogit, kq, dhj);
                axpy(dlogit, tape.h.row(j), &mut dkq);
            }

            // kq = W_k[:, cols] q[cols]
            let q_l = &tape.q[cols.clone()];
            let dq_l = &mut dq[cols.clone()];
            for r in 0..d {
                axpy(dkq[r], q_l, &mut grads.wk.row_mut(r)[cols.clone()]);
                axpy(dkq[r], &self.wk.row(r)[cols.clone()], dq_l);
            }
        }

        // q = z_Q · W_q
        for r in 0..d {
            axpy(self.query_token[r], &dq, grads.wq.row_mut(r));
            grads.query_token[r] += dot(self.wq.row(r), &dq);
        }

        // h = X · W_in
        for j in (0..t).filter(|&j| live(j)) {
            let dhj = dh_mat.row(j);
            for (k, &xv) in tape.x.row(j).iter().enumerate() {
                axpy(xv, dhj, grads.input_proj.row_mut(k));
            }
        }
        Ok(())
    }
}

fn check_dims(d_in: usize, dim: usize, heads: usize) -> Result<()> {
    if d_in == 0 || dim == 0 || heads == 0 {
        return Err(Error::Config(format!(
            "head dimensions must be positive (d_in={d_in}, dim={dim}, heads={heads})"
        )));
    }
    if dim % heads != 0 {
        return Err(Error::Config(format!(
            "dim {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

fn group_lengths(d_in: usize, dim: usize) -> [usize; 8] {
    let sq = dim * dim;
    [d_in * dim, dim, sq, sq, sq, sq, dim, dim]
}

impl HeadGradients {
    pub fn zeros_like(head: &ProjectionHead) -> Self {
        let d = head.dim;
        Self {
            input_proj: Matrix::zeros(head.input_dim(), d),
            query_token: vec![0.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ln_gain: vec![0.0; d],
            ln_bias: vec![0.0; d],
        }
    }

    fn matches(&self, head: &ProjectionHead) -> bool {
        self.groups()
            .iter()
            .zip(head.params())
            .all(|(g, p)| g.len() == p.len())
    }

    /// Gradient groups in [`PARAM_GROUPS`] order.
    pub fn groups(&self) -> [&[f64]; 8] {
        [
            self.input_proj.data(),
            &self.query_token,
            self.wq.data(),
            self.wk.data(),
            self.wv.data(),
            self.wo.data(),
            &self.ln_gain,
            &self.ln_bias,
        ]
    }

    fn groups_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.input_proj.data_mut(),
            &mut self.query_token,
            self.wq.data_mut(),
            self.wk.data_mut(),
            self.wv.data_mut(),
            self.wo.data_mut(),
            &mut self.ln_gain,
            &mut self.ln_bias,
        ]
    }

    /// `self += other`, element by element.
    pub fn add_assign(&mut self, other: &HeadGradients) {
        for (dst, src) in self.groups_mut().into_iter().zip(other.groups()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups()
            .iter()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tokens(rng: &mut Rng, t: usize, d_in: usize) -> TokenEmbeddings {
        let data = (0..t * d_in).map(|_| rng.normal(0.0, 1.0)).collect();
        TokenEmbeddings {
            id: "x".into(),
            tokens: Matrix::from_vec(t, d_in, data).unwrap(),
        }
    }

    /// Head with a larger query token so attention is far from uniform.
    fn sharp_head(seed: u64, d_in: usize, dim: usize, heads: usize) -> ProjectionHead {
        let mut rng = Rng::new(seed);
        let mut head = ProjectionHead::init(&mut rng, d_in, dim, heads).unwrap();
        for v in head.params_mut()[1].iter_mut() {
            *v = rng.normal(0.0, 1.5);
        }
        for v in head.params_mut()[6].iter_mut() {
            *v = rng.uniform(0.5, 1.5);
        }
        for v in head.params_mut()[7].iter_mut() {
            *v = rng.normal(0.0, 0.3);
        }
        head
    }

    /// Directly evaluates the pooling equation with explicit per-head
    /// keys and values.
    fn reference_forward(head: &ProjectionHead, x: &Matrix) -> Vec<f64> {
        let d = head.dim();
        let dh = head.head_width();
        let p = head.params();
        let w_in = Matrix::from_vec(head.input_dim(), d, p[0].to_vec()).unwrap();
        let wq = Matrix::from_vec(d, d, p[2].to_vec()).unwrap();
        let wk = Matrix::from_vec(d, d, p[3].to_vec()).unwrap();
        let wv = Matrix::from_vec(d, d, p[4].to_vec()).unwrap();
        let wo = Matrix::from_vec(d, d, p[5].to_vec()).unwrap();
        let h = x.matmul(&w_in).unwrap();
        let q = Matrix::from_vec(1, d, p[1].to_vec())
            .unwrap()
            .matmul(&wq)
            .unwrap();
        let k = h.matmul(&wk).unwrap();
        let v = h.matmul(&wv).unwrap();
        let mut concat = vec![0.0; d];
        for l in 0..head.heads() {
            let cols = l * dh..(l + 1) * dh;
            let logits: Vec<f64> = (0..x.rows())
                .map(|j| dot(&q.row(0)[cols.clone()], &k.row(j)[cols.clone()]) / (d as f64).sqrt())
                .collect();
            let a = numkit::softmax_row(&logits, None).unwrap();
            for j in 0..x.rows() {
                for c in cols.clone() {
                    concat[c] += a[j] * v.get(j, c);
                }
            }
        }
        let y = Matrix::from_vec(1, d, concat).unwrap().matmul(&wo).unwrap();
        let z = numkit::layer_norm(y.row(0), p[6], p[7], LN_EPS).unwrap();
        numkit::l2_normalize(&z).unwrap()
    }

    #[test]
    fn factored_forward_matches_direct_evaluation() {
        let head = sharp_head(11, 6, 8, 2);
        let x = random_tokens(&mut Rng::new(12), 5, 6);
        let (out, _) = head.forward(&x).unwrap();
        let reference = reference_forward(&head, &x.tokens);
        for (a, b) in out.as_slice().iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ProjectionHead::init(&mut Rng::new(5), 10, 16, 4).unwrap();
        let b = ProjectionHead::init(&mut Rng::new(5), 10, 16, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.ln_gain().iter().all(|&g| g == 1.0));
        assert!(a.ln_bias().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_partitions_heads() {
        let head = ProjectionHead::init(&mut Rng::new(0), 64, 128, 4).unwrap();
        assert_eq!(head.heads(), 4);
        assert_eq!(head.head_width(), 32);
    }

    #[test]
    fn init_rejects_indivisible_dim() {
        assert!(matches!(
            ProjectionHead::init(&mut Rng::new(0), 8, 10, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn glorot_bounds_respected() {
        let head = ProjectionHead::init(&mut Rng::new(3), 20, 12, 3).unwrap();
        let p = head.params();
        let bound_in = (6.0f64 / 32.0).sqrt();
        let bound_sq = (6.0f64 / 24.0).sqrt();
        assert!(p[0].iter().all(|v| v.abs() <= bound_in));
        for g in [2, 3, 4, 5] {
            assert!(p[g].iter().all(|v| v.abs() <= bound_sq));
        }
    }

    #[test]
    fn single_token_attends_fully() {
        let head = sharp_head(1, 4, 8, 2);
        let x = random_tokens(&mut Rng::new(2), 1, 4);
        let (_, tape) = head.forward(&x).unwrap();
        for a in tape.attention() {
            assert_eq!(a, &vec![1.0]);
        }
        // with only one key, the query token does not matter
        let mut other = head.clone();
        for v in other.params_mut()[1].iter_mut() {
            *v *= -3.0;
        }
        let (p1, _) = head.forward(&x).unwrap();
        let (p2, _) = other.forward(&x).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn duplicated_tokens_give_same_output() {
        let head = sharp_head(4, 5, 8, 4);
        let x = random_tokens(&mut Rng::new(9), 4, 5);
        let doubled = Matrix::from_rows(
            &(0..8)
                .map(|j| x.tokens.row(j % 4).to_vec())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let (a, _) = head.forward(&x).unwrap();
        let b = head.embed(&doubled, None).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn padded_rows_are_ignored() {
        let head = sharp_head(6, 3, 8, 2);
        let x = random_tokens(&mut Rng::new(1), 3, 3);
        let mut rows: Vec<Vec<f64>> = (0..3).map(|j| x.tokens.row(j).to_vec()).collect();
        rows.push(vec![100.0, -50.0, 7.0]);
        rows.push(vec![0.0; 3]);
        let padded = Matrix::from_rows(&rows).unwrap();
        let mask = [true, true, true, false, false];
        let (a, _) = head.forward(&x).unwrap();
        let (b, tape) = head.forward_masked(&padded, Some(&mask)).unwrap();
        assert_eq!(tape.attention()[0][3], 0.0);
        assert_eq!(tape.attention()[1][4], 0.0);
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn fully_masked_input_is_degenerate() {
        let head = sharp_head(6, 3, 4, 2);
        let x = Matrix::zeros(2, 3);
        assert!(matches!(
            head.forward_masked(&x, Some(&[false, false])),
            Err(Error::DegenerateMask)
        ));
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let head = sharp_head(6, 3, 4, 2);
        let x = random_tokens(&mut Rng::new(0), 2, 5);
        assert!(matches!(head.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn output_is_unit_norm() {
        let mut rng = Rng::new(77);
        for seed in 0..10 {
            let head = sharp_head(seed, 7, 16, 4);
            let t = rng.int_inclusive(1, 9);
            let x = random_tokens(&mut rng, t, 7);
            let (p, _) = head.forward(&x).unwrap();
            assert!((numkit::norm(p.as_slice()) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let head = sharp_head(8, 5, 8, 2);
        let x = random_tokens(&mut Rng::new(8), 6, 5);
        let (a, _) = head.forward(&x).unwrap();
        let (b, _) = head.forward(&x).unwrap();
        assert!(a
            .0
            .iter()
            .zip(&b.0)
            .all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let head = sharp_head(2, 4, 8, 2);
        let x = random_tokens(&mut Rng::new(3), 3, 4);
        let (_, tape) = head.forward(&x).unwrap();
        let g = head.backward(&tape, &[0.0; 8]).unwrap();
        assert!(g.groups().iter().all(|grp| grp.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn ln_bias_gradient_is_normalize_jacobian() {
        let head = sharp_head(21, 4, 8, 2);
        let x = random_tokens(&mut Rng::new(22), 5, 4);
        let (out, tape) = head.forward(&x).unwrap();
        let mut rng = Rng::new(23);
        let g: Vec<f64> = (0..8).map(|_| rng.normal(0.0, 1.0)).collect();
        let grads = head.backward(&tape, &g).unwrap();
        // out = z/‖z‖  ⇒  ∂L/∂z = (g − out (out·g)) / ‖z‖, and ∂z/∂bias = I
        let z = tape.pre_normalize();
        let zn = numkit::norm(&z);
        let o = out.as_slice();
        let og = dot(o, &g);
        for i in 0..8 {
            let expected = (g[i] - o[i] * og) / zn;
            assert!((grads.ln_bias[i] - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut head = sharp_head(2, 4, 8, 2);
        let x = random_tokens(&mut Rng::new(3), 3, 4);
        let (_, tape) = head.forward(&x).unwrap();
        head.params_mut()[0][0] += 0.1;
        assert!(matches!(
            head.backward(&tape, &[1.0; 8]),
            Err(Error::Contract(_))
        ));
        let other = sharp_head(2, 5, 8, 2);
        assert!(other.backward(&tape, &[1.0; 8]).is_err());
    }

    /// Central differences of `L = c · out` on every coordinate of every group.
    fn finite_difference_check(seed: u64, t: usize, masked: bool) {
        let mut head = sharp_head(seed, 5, 8, 2);
        let mut rng = Rng::new(seed + 100);
        let x = random_tokens(&mut rng, t, 5);
        let mask: Option<Vec<bool>> = masked.then(|| (0..t).map(|j| j != 1).collect());
        let c: Vec<f64> = (0..8).map(|_| rng.normal(0.0, 1.0)).collect();
        let (_, tape) = head.forward_masked(&x.tokens, mask.as_deref()).unwrap();
        let analytic = head.backward(&tape, &c).unwrap();
        let h = 1e-5;
        for g in 0..PARAM_GROUPS.len() {
            for i in 0..head.params()[g].len() {
                let orig = head.params()[g][i];
                head.params_mut()[g][i] = orig + h;
                let up = dot(
                    head.embed(&x.tokens, mask.as_deref()).unwrap().as_slice(),
                    &c,
                );
                head.params_mut()[g][i] = orig - h;
                let down = dot(
                    head.embed(&x.tokens, mask.as_deref()).unwrap().as_slice(),
                    &c,
                );
                head.params_mut()[g][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.groups()[g][i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel <= 1e-4,
                    "{}[{i}]: analytic {a} numeric {numeric} rel {rel}",
                    PARAM_GROUPS[g]
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            finite_difference_check(seed, 4, false);
        }
    }

    #[test]
    fn masked_gradients_match_finite_differences() {
        finite_difference_check(9, 4, true);
    }
}
