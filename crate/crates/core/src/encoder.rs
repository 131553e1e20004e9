//! Document encoder: Conformer layers (grouped convolution, separable
//! multi-head self-attention, feed-forward) and the standard Transformer
//! layer kept as the memory baseline.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::probe;
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;
use crate::text::{self, TokenSequence};

/// Probe label of every buffer created by separable attention.
pub const SEP_ATTN_LABEL: &str = "sep_attn";
/// Probe label of the `n×n` probability matrix of standard attention.
pub const ATTN_MATRIX_LABEL: &str = "attn_matrix";
/// Probe label of the remaining per-head buffers of standard attention.
pub const ATTN_HEADS_LABEL: &str = "attn_heads";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Separable,
    Standard,
}

/// `Φ(Q·Kᵀ/√d_k)·V` for one head. Materializes the `n×n` matrix.
pub fn standard_self_attention(tape: &mut Tape, q: Var, k: Var, v: Var, key_mask: Option<&[bool]>) -> Result<Var> {
    let (_, d) = tape.value(q).dims2()?;
    let scale = 1.0 / (d as f64).sqrt();
    let probs = probe::label(ATTN_MATRIX_LABEL, || tape.scaled_dot_softmax(q, k, scale, key_mask))?;
    probe::label(ATTN_HEADS_LABEL, || tape.matmul(probs, v))
}

/// `Φ(Q)·(Φ(Kᵀ)·V)` for one head: `Φ(Kᵀ)` normalizes each key feature over
/// the (unmasked) positions, `Φ(Q)` each query row over its features. The
/// largest buffer is `n × d`.
pub fn separable_self_attention(tape: &mut Tape, q: Var, k: Var, v: Var, key_mask: Option<&[bool]>) -> Result<Var> {
    probe::label(SEP_ATTN_LABEL, || {
        let k_soft = tape.softmax(k, Axis::Rows, key_mask)?;
        let a = tape.matmul_tn(k_soft, v)?;
        let q_soft = tape.softmax(q, Axis::Cols, None)?;
        tape.matmul(q_soft, a)
    })
}

/// Parameters of one encoder block. `conv` is absent for the standard
/// Transformer baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub kind: AttentionKind,
    conv: Option<(ParamId, ParamId)>,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, values).expect("shape matches element count")
}

pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(&[rows, cols], (6.0 / (rows + cols) as f64).sqrt(), rng)
}

impl EncoderLayer {
    pub fn init(
        params: &mut ParamStore,
        prefix: &str,
        cfg: &AttentionConfig,
        kind: AttentionKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.model_dim;
        let mut add = |name: &str, t: Tensor| params.add(format!("{prefix}.{name}"), t);
        let conv = match kind {
            AttentionKind::Separable => {
                let cg = h / cfg.conv_groups;
                let bound = 1.0 / ((cg * cfg.conv_window) as f64).sqrt();
                let w = uniform(&[h, cg, cfg.conv_window], bound, rng);
                Some((add("conv.w", w), add("conv.b", Tensor::zeros(&[h]))))
            }
            AttentionKind::Standard => None,
        };
        let wq = add("attn.wq", xavier(h, h, rng));
        let wk = add("attn.wk", xavier(h, h, rng));
        let wv = add("attn.wv", xavier(h, h, rng));
        let wo = add("attn.wo", xavier(h, h, rng));
        let bo = add("attn.bo", Tensor::zeros(&[h]));
        let ln1 = (
            add("ln1.gamma", Tensor::full(&[h], 1.0)),
            add("ln1.beta", Tensor::zeros(&[h])),
        );
        let ff1 = (
            add("ff1.w", xavier(h, cfg.ff_dim, rng)),
            add("ff1.b", Tensor::zeros(&[cfg.ff_dim])),
        );
        let ff2 = (
            add("ff2.w", xavier(cfg.ff_dim, h, rng)),
            add("ff2.b", Tensor::zeros(&[h])),
        );
        let ln2 = (
            add("ln2.gamma", Tensor::full(&[h], 1.0)),
            add("ln2.beta", Tensor::zeros(&[h])),
        );
        Ok(Self {
            kind,
            conv,
            wq,
            wk,
            wv,
            wo,
            bo,
            ln1,
            ff1,
            ff2,
            ln2,
        })
    }

    /// Heads on disjoint `d_key` column slices, concatenated.
    fn multi_head(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x: Var,
        key_mask: Option<&[bool]>,
        cfg: &AttentionConfig,
    ) -> Result<Var> {
        let (n, _) = tape.value(x).dims2()?;
        let wq = params.var(tape, self.wq);
        let wk = params.var(tape, self.wk);
        let wv = params.var(tape, self.wv);
        let (q, k, v) = (tape.matmul(x, wq)?, tape.matmul(x, wk)?, tape.matmul(x, wv)?);
        let dk = cfg.d_key();
        let heads = |tape: &mut Tape| -> Result<Var> {
            let mut outs = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let qh = tape.slice_cols(q, hd * dk, dk)?;
                let kh = tape.slice_cols(k, hd * dk, dk)?;
                let vh = tape.slice_cols(v, hd * dk, dk)?;
                outs.push(match self.kind {
                    AttentionKind::Separable => separable_self_attention(tape, qh, kh, vh, key_mask)?,
                    AttentionKind::Standard => standard_self_attention(tape, qh, kh, vh, key_mask)?,
                });
            }
            tape.concat_cols(&outs)
        };
        match self.kind {
            AttentionKind::Separable => probe::label(SEP_ATTN_LABEL, || heads(tape)),
            AttentionKind::Standard => {
                // all heads' matrices are live at once, as in a batched kernel
                probe::ensure_capacity(cfg.heads * n * n);
                probe::label(ATTN_HEADS_LABEL, || heads(tape))
            }
        }
    }

    /// One block: conv → attention → projection → residual + LN → FFN →
    /// residual + LN. `mask` marks real (non-padding) rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x: Var,
        mask: Option<&[bool]>,
        cfg: &AttentionConfig,
    ) -> Result<Var> {
        let (_, h) = tape.value(x).dims2()?;
        if h != cfg.model_dim {
            return Err(Error::dim("encoder layer", &[0, cfg.model_dim], &[0, h]));
        }
        let local = match self.conv {
            Some((w, b)) => {
                let (w, b) = (params.var(tape, w), params.var(tape, b));
                tape.conv1d(x, w, b, cfg.conv_window, cfg.conv_groups)?
            }
            None => x,
        };
        let att = self.multi_head(tape, params, local, mask, cfg)?;
        let wo = params.var(tape, self.wo);
        let bo = params.var(tape, self.bo);
        let proj = tape.matmul(att, wo)?;
        let proj = tape.add_row(proj, bo)?;
        let proj = tape.dropout(proj, cfg.dropout)?;
        let res = tape.add(x, proj)?;
        let (g1, b1) = (params.var(tape, self.ln1.0), params.var(tape, self.ln1.1));
        let y = tape.layer_norm(res, g1, b1)?;

        let (w1, c1) = (params.var(tape, self.ff1.0), params.var(tape, self.ff1.1));
        let (w2, c2) = (params.var(tape, self.ff2.0), params.var(tape, self.ff2.1));
        let hidden = tape.matmul(y, w1)?;
        let hidden = tape.add_row(hidden, c1)?;
        let hidden = tape.relu(hidden);
        let ff = tape.matmul(hidden, w2)?;
        let ff = tape.add_row(ff, c2)?;
        let ff = tape.dropout(ff, cfg.dropout)?;
        let res = tape.add(y, ff)?;
        let (g2, b2) = (params.var(tape, self.ln2.0), params.var(tape, self.ln2.1));
        tape.layer_norm(res, g2, b2)
    }
}

/// Conformer block forward pass.
pub fn conformer_forward(
    tape: &mut Tape,
    params: &ParamStore,
    layer: &EncoderLayer,
    x: Var,
    cfg: &AttentionConfig,
) -> Result<Var> {
    layer.forward(tape, params, x, None, cfg)
}

/// Stack of Conformer layers over the embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: AttentionConfig,
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn init(params: &mut ParamStore, cfg: AttentionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::init(params, &format!("layer{i}"), &cfg, AttentionKind::Separable, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, layers })
    }
}

fn mask_rows(tape: &mut Tape, x: Var, mask: Option<&[bool]>) -> Result<Var> {
    match mask {
        Some(m) => tape.mul_rows_const(x, m.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()),
        None => Ok(x),
    }
}

/// Embeds `doc` and runs the layer stack; padding rows are zeroed before and
/// after every layer and also excluded as attention keys.
pub fn encode_document(
    tape: &mut Tape,
    params: &ParamStore,
    table: Var,
    doc: &TokenSequence,
    encoder: &Encoder,
) -> Result<Var> {
    if doc.is_empty() {
        return Err(Error::Contract("cannot encode an empty document".into()));
    }
    let full = doc.mask();
    let mask = if full.iter().all(|m| *m) {
        None
    } else {
        Some(full.as_slice())
    };
    let mut x = text::embed(tape, table, doc)?;
    for layer in &encoder.layers {
        x = mask_rows(tape, x, mask)?;
        x = layer.forward(tape, params, x, mask, &encoder.cfg)?;
        x = mask_rows(tape, x, mask)?;
    }
    Ok(x)
}

#[cfg(test)]
#[path = "encoder_tests.rs"]
mod tests;
