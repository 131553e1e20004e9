//! Per-term matching: interaction matrix, (windowed) kernel pooling, the
//! latent aggregator, the learned-BM25 explicit channel and the Duet
//! combination.

use rand_chacha::ChaCha8Rng;

use crate::encoder::xavier;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const EXACT_MATCH_MU: f64 = 1.0;
pub const EXACT_MATCH_SIGMA: f64 = 0.001;
pub const KERNEL_SIGMA: f64 = 0.1;
/// The small constant of the explicit score and of BatchScale.
pub const EPSILON: f64 = 1e-6;

/// Gaussian kernels: `k-1` means evenly spaced on `[-1, 1)` with σ 0.1, then
/// the exact-match kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    pub mus: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl KernelBank {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("kernel bank needs k >= 2, got {k}")));
        }
        let soft = k - 1;
        let mut mus: Vec<f64> = (0..soft).map(|i| -1.0 + 2.0 * i as f64 / soft as f64).collect();
        let mut sigmas = vec![KERNEL_SIGMA; soft];
        mus.push(EXACT_MATCH_MU);
        sigmas.push(EXACT_MATCH_SIGMA);
        Ok(Self { mus, sigmas })
    }

    pub fn len(&self) -> usize {
        self.mus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mus.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    pub window: usize,
    pub stride: usize,
    pub top: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window: 300,
            stride: 100,
            top: 3,
        }
    }
}

impl WindowConfig {
    /// `[start, end)` of every window over `n` positions. Windows start every
    /// `stride` until one reaches the end; the last may be shorter.
    pub fn bounds(&self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        loop {
            let end = (start + self.window).min(n);
            out.push((start, end));
            if end >= n {
                break;
            }
            start += self.stride;
        }
        out
    }
}

/// Cosine similarity of every query row with every document row.
pub fn interaction_matrix(tape: &mut Tape, query: Var, doc: Var) -> Result<Var> {
    tape.cosine_rows(query, doc)
}

/// The shared `k → k → 1` ReLU network that turns kernel features into a
/// scalar, one row at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Aggregator {
    pub fn init(params: &mut ParamStore, prefix: &str, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: params.add(format!("{prefix}.w1"), xavier(k, k, rng)),
            b1: params.add(format!("{prefix}.b1"), Tensor::zeros(&[k])),
            w2: params.add(format!("{prefix}.w2"), xavier(k, 1, rng)),
            b2: params.add(format!("{prefix}.b2"), Tensor::zeros(&[1])),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// `features: m×k` to scores `m×1`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, features: Var) -> Result<Var> {
        let (w1, b1) = (params.var(tape, self.w1), params.var(tape, self.b1));
        let (w2, b2) = (params.var(tape, self.w2), params.var(tape, self.b2));
        let h = tape.matmul(features, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let s = tape.matmul(h, w2)?;
        tape.add_row(s, b2)
    }
}

/// Kernel pooling of every row of `x: q×n` over unmasked positions.
pub fn kernel_pool(tape: &mut Tape, x: Var, mask: &[bool], bank: &KernelBank) -> Result<Var> {
    let (_, n) = tape.value(x).dims2()?;
    tape.kernel_pool(x, 0, n, mask, &bank.mus, &bank.sigmas)
}

/// Windowed kernel pooling of every row of `x: q×n`: each row keeps the
/// `top` windows the aggregator scores highest (earlier window on ties) and
/// returns the mean of their feature vectors. Windows with no unmasked
/// position are skipped unless all are.
pub fn windowed_kernel_pool(
    tape: &mut Tape,
    params: &ParamStore,
    x: Var,
    mask: &[bool],
    bank: &KernelBank,
    cfg: &WindowConfig,
    aggregator: &Aggregator,
) -> Result<Var> {
    let (q, n) = tape.value(x).dims2()?;
    if mask.len() != n {
        return Err(Error::dim("windowed_kernel_pool", &[q, n], &[mask.len()]));
    }
    let mut bounds = cfg.bounds(n);
    if bounds.len() > 1 {
        let live: Vec<_> = bounds
            .iter()
            .copied()
            .filter(|(s, e)| mask[*s..*e].iter().any(|m| *m))
            .collect();
        if !live.is_empty() {
            bounds = live;
        }
    }
    if bounds.len() == 1 {
        let (s, e) = bounds[0];
        return tape.kernel_pool(x, s, e, mask, &bank.mus, &bank.sigmas);
    }
    let pooled = bounds
        .iter()
        .map(|(s, e)| tape.kernel_pool(x, *s, *e, mask, &bank.mus, &bank.sigmas))
        .collect::<Result<Vec<_>>>()?;
    let scores = pooled
        .iter()
        .map(|p| aggregator.forward(tape, params, *p))
        .collect::<Result<Vec<_>>>()?;
    let top = cfg.top.min(bounds.len()).max(1);
    let mut weights = vec![vec![0.0; q]; bounds.len()];
    for row in 0..q {
        let mut order: Vec<usize> = (0..bounds.len()).collect();
        let score = |w: usize| tape.value(scores[w]).data()[row];
        order.sort_by(|a, b| score(*b).total_cmp(&score(*a)).then(a.cmp(b)));
        for w in &order[..top] {
            weights[*w][row] = 1.0 / top as f64;
        }
    }
    let mut acc: Option<Var> = None;
    for (p, w) in pooled.into_iter().zip(weights) {
        if w.iter().all(|v| *v == 0.0) {
            continue;
        }
        let part = tape.mul_rows_const(p, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, part)?,
            None => part,
        });
    }
    Ok(acc.expect("at least one window selected"))
}

/// Train mode normalizes with batch statistics; infer mode with running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running statistics of one BatchNorm channel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningNorm {
    pub mean: Option<f64>,
    pub var: f64,
}

impl RunningNorm {
    /// First observation initializes; later ones blend with `momentum`.
    pub fn update(&mut self, mean: f64, var: f64, momentum: f64) {
        match self.mean {
            None => {
                self.mean = Some(mean);
                self.var = var;
            }
            Some(m) => {
                self.mean = Some((1.0 - momentum) * m + momentum * mean);
                self.var = (1.0 - momentum) * self.var + momentum * var;
            }
        }
    }
}

/// Running mean of one BatchScale channel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningScale {
    pub mean: Option<f64>,
}

impl RunningScale {
    pub fn update(&mut self, mean: f64, momentum: f64) {
        self.mean = Some(match self.mean {
            None => mean,
            Some(m) => (1.0 - momentum) * m + momentum * mean,
        });
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// BatchNorm of a vector. Returns the batch `(mean, variance)` in train mode
/// so the caller can fold it into the running state.
pub fn batch_norm(tape: &mut Tape, x: Var, state: &RunningNorm, mode: Mode) -> Result<(Var, Option<(f64, f64)>)> {
    match mode {
        Mode::Train => {
            let y = tape.batch_norm(x, None)?;
            Ok((y, Some(mean_var(tape.value(x).data()))))
        }
        Mode::Infer => {
            let mean = state.mean.ok_or(Error::UninitializedStats)?;
            Ok((tape.batch_norm(x, Some((mean, state.var)))?, None))
        }
    }
}

/// BatchScale `x / (E[x] + ε)` of non-negative constants; returns the batch
/// mean in train mode.
pub fn batch_scale(x: &[f64], state: &RunningScale, mode: Mode) -> Result<(Vec<f64>, Option<f64>)> {
    if x.iter().any(|v| *v < 0.0) {
        return Err(Error::Contract("batch scale of a negative value".into()));
    }
    let (mean, observed) = match mode {
        Mode::Train => {
            if x.is_empty() {
                return Err(Error::Contract("batch scale of an empty batch".into()));
            }
            let m = x.iter().sum::<f64>() / x.len() as f64;
            (m, Some(m))
        }
        Mode::Infer => (state.mean.ok_or(Error::UninitializedStats)?, None),
    };
    Ok((x.iter().map(|v| v / (mean + EPSILON)).collect(), observed))
}

/// Smoothed BM25 inverse document frequency, never negative.
pub fn idf(num_docs: u64, df: u64) -> f64 {
    let (n, df) = (num_docs as f64, df as f64);
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

/// Learned-BM25 term score
/// `IDF · BS(TF) / (BS(TF) + ReLU(w_dlen · BS(|d|) + b_dlen) + ε)` for a
/// batch of already scaled inputs; differentiable in `w_dlen` and `b_dlen`.
pub fn explicit_term_score(
    tape: &mut Tape,
    idf: &[f64],
    scaled_tf: &[f64],
    scaled_len: &[f64],
    w_dlen: Var,
    b_dlen: Var,
) -> Result<Var> {
    if idf.len() != scaled_tf.len() || idf.len() != scaled_len.len() {
        return Err(Error::dim(
            "explicit_term_score",
            &[idf.len(), scaled_tf.len()],
            &[scaled_len.len()],
        ));
    }
    let len = tape.constant(Tensor::vector(scaled_len.to_vec()));
    let z = tape.mul_scalar_var(len, w_dlen)?;
    let z = tape.add_scalar_var(z, b_dlen)?;
    let z = tape.relu(z);
    let tf = tape.constant(Tensor::vector(scaled_tf.to_vec()));
    let denom = tape.add(tf, z)?;
    let denom = tape.add_const(denom, EPSILON);
    let ratio = tape.div(tf, denom)?;
    tape.mul_const(ratio, idf.to_vec())
}

/// Scalar form of [`explicit_term_score`].
pub fn explicit_term_value(idf: f64, scaled_tf: f64, scaled_len: f64, w_dlen: f64, b_dlen: f64) -> f64 {
    idf * scaled_tf / (scaled_tf + (w_dlen * scaled_len + b_dlen).max(0.0) + EPSILON)
}

/// `w1 · latent + w2 · explicit + b` over already normalized batches.
pub fn duet_combine(tape: &mut Tape, latent: Var, explicit: Var, w1: Var, w2: Var, b: Var) -> Result<Var> {
    let l = tape.mul_scalar_var(latent, w1)?;
    let e = tape.mul_scalar_var(explicit, w2)?;
    let s = tape.add(l, e)?;
    tape.add_scalar_var(s, b)
}

#[cfg(test)]
#[path = "scorer_tests.rs"]
mod tests;
