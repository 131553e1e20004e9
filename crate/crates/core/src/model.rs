//! The Conformer-Kernel model with query term independence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::encoder::{encode_document, Encoder};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scorer::{self, Aggregator, KernelBank, Mode, RunningNorm, RunningScale, WindowConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{self, TokenSequence};

/// One query term as the scorer sees it: its vocabulary id plus the
/// collection statistics of the explicit channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermInput {
    pub id: u32,
    pub idf: f64,
    pub tf: f64,
}

/// A document as the scorer sees it: truncated token ids and the
/// untruncated length.
#[derive(Debug, Clone, PartialEq)]
pub struct DocInput {
    pub tokens: TokenSequence,
    pub length: f64,
}

/// Query terms to score against `docs[doc]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreItem {
    pub doc: usize,
    pub terms: Vec<TermInput>,
}

/// Running statistics of the four normalized channels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormStats {
    pub latent: RunningNorm,
    pub explicit: RunningNorm,
    pub tf: RunningScale,
    pub length: RunningScale,
}

impl NormStats {
    pub fn is_initialized(&self) -> bool {
        self.latent.mean.is_some()
            && self.explicit.mean.is_some()
            && self.tf.mean.is_some()
            && self.length.mean.is_some()
    }
}

/// Batch statistics seen by one train-mode forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchObservation {
    pub latent: (f64, f64),
    pub explicit: (f64, f64),
    pub tf: f64,
    pub length: f64,
}

/// Outputs of [`CkModel::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// `s_{t,d}` of every term of every item, in item order.
    pub term_scores: Var,
    /// Per-item sum of its term scores.
    pub item_scores: Var,
    pub observation: Option<BatchObservation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkModel {
    pub config: Config,
    pub params: ParamStore,
    pub stats: NormStats,
    pub bank: KernelBank,
    pub window: WindowConfig,
    embed: ParamId,
    encoder: Encoder,
    aggregator: Aggregator,
    w_dlen: ParamId,
    b_dlen: ParamId,
    w_latent: ParamId,
    w_explicit: ParamId,
    bias: ParamId,
}

impl CkModel {
    /// Freshly initialized model for a vocabulary of `vocab_size` ids,
    /// seeded from `config.seed`.
    pub fn new(config: &Config, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(Error::Config("vocabulary needs padding and OOV ids".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let embed = params.add(
            "embedding",
            text::init_embeddings(vocab_size, config.embedding_dim, &mut rng),
        );
        let encoder = Encoder::init(&mut params, config.attention(), &mut rng)?;
        let bank = KernelBank::new(config.kernels)?;
        let aggregator = Aggregator::init(&mut params, "aggregator", bank.len(), &mut rng);
        let mut scalar = |name: &str, v: f64| params.add(name, Tensor::scalar(v));
        let w_dlen = scalar("explicit.w_dlen", 0.9);
        let b_dlen = scalar("explicit.b_dlen", 0.3);
        let w_latent = scalar("duet.w_latent", 1.0);
        let w_explicit = scalar("duet.w_explicit", 1.0);
        let bias = scalar("duet.bias", 0.0);
        Ok(Self {
            config: config.clone(),
            params,
            stats: NormStats::default(),
            bank,
            window: WindowConfig {
                window: config.pool_window,
                stride: config.pool_stride,
                top: config.top_windows,
            },
            embed,
            encoder,
            aggregator,
            w_dlen,
            b_dlen,
            w_latent,
            w_explicit,
            bias,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.params.get(self.embed).shape()[0]
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embed
    }

    /// Copy that ranks by the explicit channel alone.
    pub fn explicit_only(&self) -> Self {
        let mut m = self.clone();
        m.params
            .set(self.w_latent, Tensor::scalar(0.0))
            .expect("scalar parameter");
        m
    }

    /// Folds a train-mode observation into the running statistics.
    pub fn observe(&mut self, obs: &BatchObservation) {
        let m = self.config.bn_momentum;
        self.stats.latent.update(obs.latent.0, obs.latent.1, m);
        self.stats.explicit.update(obs.explicit.0, obs.explicit.1, m);
        self.stats.tf.update(obs.tf, m);
        self.stats.length.update(obs.length, m);
    }

    pub fn forward(&self, tape: &mut Tape, docs: &[DocInput], items: &[ScoreItem], mode: Mode) -> Result<Forward> {
        self.forward_with(&self.params, tape, docs, items, mode)
    }

    /// Forward pass with an explicit parameter store (same layout as
    /// `self.params`).
    pub fn forward_with(
        &self,
        params: &ParamStore,
        tape: &mut Tape,
        docs: &[DocInput],
        items: &[ScoreItem],
        mode: Mode,
    ) -> Result<Forward> {
        let lens: Vec<usize> = items.iter().map(|it| it.terms.len()).collect();
        let total: usize = lens.iter().sum();
        if total == 0 {
            let term_scores = tape.constant(Tensor::vector(Vec::new()));
            let item_scores = tape.constant(Tensor::zeros(&[items.len()]));
            return Ok(Forward {
                term_scores,
                item_scores,
                observation: None,
            });
        }
        let table = params.var(tape, self.embed);
        let mut encoded: Vec<Option<Var>> = vec![None; docs.len()];
        let mut latent_parts = Vec::new();
        let (mut idf, mut tf, mut dlen) = (Vec::new(), Vec::new(), Vec::new());
        for item in items.iter().filter(|it| !it.terms.is_empty()) {
            let doc = docs
                .get(item.doc)
                .ok_or_else(|| Error::Contract(format!("item refers to document {} of {}", item.doc, docs.len())))?;
            let enc = match encoded[item.doc] {
                Some(v) => v,
                None => {
                    let v = encode_document(tape, params, table, &doc.tokens, &self.encoder)?;
                    encoded[item.doc] = Some(v);
                    v
                }
            };
            let ids: Vec<usize> = item.terms.iter().map(|t| t.id as usize).collect();
            let q = tape.gather(table, &ids)?;
            let x = scorer::interaction_matrix(tape, q, enc)?;
            let feats = scorer::windowed_kernel_pool(
                tape,
                params,
                x,
                &doc.tokens.mask(),
                &self.bank,
                &self.window,
                &self.aggregator,
            )?;
            latent_parts.push(self.aggregator.forward(tape, params, feats)?);
            for t in &item.terms {
                idf.push(t.idf);
                tf.push(t.tf);
                dlen.push(doc.length);
            }
        }
        let latent = tape.concat_rows(&latent_parts)?;
        let latent = tape.reshape(latent, &[total])?;

        let (tf_s, tf_mean) = scorer::batch_scale(&tf, &self.stats.tf, mode)?;
        let (len_s, len_mean) = scorer::batch_scale(&dlen, &self.stats.length, mode)?;
        let w_dlen = params.var(tape, self.w_dlen);
        let b_dlen = params.var(tape, self.b_dlen);
        let explicit = scorer::explicit_term_score(tape, &idf, &tf_s, &len_s, w_dlen, b_dlen)?;

        let (latent_n, latent_obs) = scorer::batch_norm(tape, latent, &self.stats.latent, mode)?;
        let (explicit_n, explicit_obs) = scorer::batch_norm(tape, explicit, &self.stats.explicit, mode)?;
        let w1 = params.var(tape, self.w_latent);
        let w2 = params.var(tape, self.w_explicit);
        let b = params.var(tape, self.bias);
        let term_scores = scorer::duet_combine(tape, latent_n, explicit_n, w1, w2, b)?;
        let item_scores = tape.segment_sum(term_scores, &lens)?;
        let observation = match (latent_obs, explicit_obs, tf_mean, len_mean) {
            (Some(latent), Some(explicit), Some(tf), Some(length)) => Some(BatchObservation {
                latent,
                explicit,
                tf,
                length,
            }),
            _ => None,
        };
        Ok(Forward {
            term_scores,
            item_scores,
            observation,
        })
    }

    /// Inference-mode `s_{t,d}` of each term against one document. Rows are
    /// computed independently, so the values do not depend on which other
    /// terms are in the call.
    pub fn term_scores(&self, doc: &DocInput, terms: &[TermInput]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let item = ScoreItem {
            doc: 0,
            terms: terms.to_vec(),
        };
        let out = self.forward(&mut tape, std::slice::from_ref(doc), &[item], Mode::Infer)?;
        Ok(tape.value(out.term_scores).to_vec())
    }

    /// `S_{q,d}`: sum of the per-term scores, one per query occurrence.
    pub fn query_document_score(&self, doc: &DocInput, terms: &[TermInput]) -> Result<f64> {
        if terms.is_empty() {
            return Err(Error::EmptyQuery);
        }
        Ok(self.term_scores(doc, terms)?.iter().sum())
    }

    /// Encodes each document once and scores its term list; inference mode.
    pub fn score_batch(&self, docs: &[DocInput], items: &[ScoreItem]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, docs, items, Mode::Infer)?;
        Ok(tape.value(out.item_scores).to_vec())
    }
}

#[cfg(test)]
#[path = "model_tests.rs"]
mod tests;
