//! Pairwise RankNet training with candidate and collection negatives.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::corpus::Collection;
use crate::error::{Error, Result};
use crate::model::{BatchObservation, CkModel, DocInput, ScoreItem};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::scorer::{Mode, RunningNorm, RunningScale};
use crate::tape::{self, Tape, Var};
use crate::tensor::Tensor;
use crate::text::{self, Vocabulary};
use crate::trec::Run;

/// One positive, one negative from the query's candidates and two from the
/// whole collection (document positions).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub qid: String,
    pub positive: usize,
    pub candidate_negative: usize,
    pub collection_negatives: [usize; 2],
}

/// `hi` is preferred over `lo`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub hi: usize,
    pub lo: usize,
}

/// The positive beats all three negatives, and the candidate negative beats
/// both collection negatives.
pub fn build_pairs(ex: &TrainingExample) -> [Pair; 5] {
    let [c1, c2] = ex.collection_negatives;
    let p = |hi, lo| Pair { hi, lo };
    [
        p(ex.positive, ex.candidate_negative),
        p(ex.positive, c1),
        p(ex.positive, c2),
        p(ex.candidate_negative, c1),
        p(ex.candidate_negative, c2),
    ]
}

/// `log(1 + exp(-(s_hi - s_lo)))` elementwise over paired score vectors.
pub fn ranknet_loss(tape: &mut Tape, s_hi: Var, s_lo: Var) -> Result<Var> {
    let neg_margin = tape.sub(s_lo, s_hi)?;
    Ok(tape.softplus(neg_margin))
}

/// Scalar RankNet loss for a margin `s_hi - s_lo`.
pub fn ranknet_value(margin: f64) -> f64 {
    tape::softplus(-margin)
}

/// Queries, positives and candidate lists resolved against a collection.
#[derive(Debug, Clone, Default)]
pub struct TrainingData {
    queries: HashMap<String, Vec<String>>,
    positives: Vec<(String, usize)>,
    known: HashMap<String, HashSet<usize>>,
    candidates: HashMap<String, Vec<usize>>,
}

impl TrainingData {
    /// Pairs whose query or document is unknown are dropped with a warning;
    /// the number dropped is returned.
    pub fn new(
        collection: &Collection,
        queries: &[(String, String)],
        pairs: &[(String, String)],
        candidates: &Run,
        max_query_terms: usize,
    ) -> Result<(Self, usize)> {
        let queries: HashMap<String, Vec<String>> = queries
            .iter()
            .map(|(q, t)| {
                let mut terms = text::tokenize(t);
                terms.truncate(max_query_terms);
                (q.clone(), terms)
            })
            .collect();
        let mut data = Self::default();
        let mut dropped = 0;
        for (qid, docid) in pairs {
            let terms_ok = queries.get(qid).is_some_and(|t| !t.is_empty());
            match (terms_ok, collection.position(docid)) {
                (true, Some(pos)) => {
                    data.positives.push((qid.clone(), pos));
                    data.known.entry(qid.clone()).or_default().insert(pos);
                }
                _ => {
                    tracing::warn!(qid, docid, "skipping training pair with unknown query or document");
                    dropped += 1;
                }
            }
        }
        for (qid, list) in candidates {
            let docs = list.iter().filter_map(|(d, _)| collection.position(d)).collect();
            data.candidates.insert(qid.clone(), docs);
        }
        data.queries = queries;
        if data.positives.is_empty() {
            return Err(Error::Format("no usable training pairs".into()));
        }
        Ok((data, dropped))
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn query_terms(&self, qid: &str) -> &[String] {
        self.queries.get(qid).map_or(&[], Vec::as_slice)
    }

    /// Completes positive pair `index` with sampled negatives. Known
    /// positives of the query are never used as negatives; `None` when the
    /// query has no usable candidate or the collection is too small.
    pub fn sample(&self, index: usize, num_docs: usize, rng: &mut ChaCha8Rng) -> Option<TrainingExample> {
        let (qid, positive) = &self.positives[index];
        let known = &self.known[qid];
        let pool: Vec<usize> = self
            .candidates
            .get(qid)?
            .iter()
            .copied()
            .filter(|d| !known.contains(d))
            .collect();
        let candidate_negative = *pool.choose(rng)?;
        let mut taken = vec![*positive, candidate_negative];
        let mut coll = [0usize; 2];
        for slot in &mut coll {
            let mut found = None;
            for _ in 0..1000 {
                let d = rng.gen_range(0..num_docs);
                if !taken.contains(&d) && !known.contains(&d) {
                    found = Some(d);
                    break;
                }
            }
            *slot = found?;
            taken.push(*slot);
        }
        Some(TrainingExample {
            qid: qid.clone(),
            positive: *positive,
            candidate_negative,
            collection_negatives: coll,
        })
    }
}

/// Model, optimizer and sampling state of one training run.
pub struct Trainer<'a> {
    pub model: CkModel,
    pub optimizer: AdamState,
    pub step: u64,
    adam: AdamConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    data: &'a TrainingData,
    collection: &'a Collection,
    vocab: &'a Vocabulary,
    vocab_hash: u64,
}

/// Per-step summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Mean RankNet loss per pair.
    pub loss: f64,
    pub pairs: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: CkModel, data: &'a TrainingData, collection: &'a Collection, vocab: &'a Vocabulary) -> Self {
        let optimizer = AdamState::new(&model.params);
        Self::resume(model, optimizer, 0, data, collection, vocab)
    }

    pub fn resume(
        model: CkModel,
        optimizer: AdamState,
        step: u64,
        data: &'a TrainingData,
        collection: &'a Collection,
        vocab: &'a Vocabulary,
    ) -> Self {
        let c = &model.config;
        let adam = AdamConfig {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        };
        let rng = ChaCha8Rng::seed_from_u64(c.seed.wrapping_add(step));
        Self {
            model,
            optimizer,
            step,
            adam,
            rng,
            order: Vec::new(),
            cursor: 0,
            data,
            collection,
            vocab,
            vocab_hash: vocab.hash(),
        }
    }

    /// Next `n` examples of a seeded shuffle, reshuffled every epoch.
    fn next_examples(&mut self, n: usize) -> Vec<TrainingExample> {
        let mut out = Vec::with_capacity(n);
        let mut misses = 0;
        while out.len() < n && misses < 10 * n + self.data.len() {
            if self.cursor >= self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let idx = self.order[self.cursor];
            self.cursor += 1;
            match self.data.sample(idx, self.collection.len(), &mut self.rng) {
                Some(ex) => out.push(ex),
                None => misses += 1,
            }
        }
        out
    }

    /// Documents and occurrence-gated score items for a set of examples,
    /// plus the item index pairs to compare.
    fn batch(&self, examples: &[TrainingExample]) -> (Vec<DocInput>, Vec<ScoreItem>, Vec<Pair>) {
        let max_len = self.model.config.max_doc_terms;
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut docs = Vec::new();
        let mut items = Vec::new();
        let mut pairs = Vec::new();
        for ex in examples {
            let terms = self.data.query_terms(&ex.qid);
            let mut item_of: HashMap<usize, usize> = HashMap::new();
            for pair in build_pairs(ex) {
                for d in [pair.hi, pair.lo] {
                    if item_of.contains_key(&d) {
                        continue;
                    }
                    let doc = *local.entry(d).or_insert_with(|| {
                        docs.push(self.collection.doc_input(d, self.vocab, max_len));
                        docs.len() - 1
                    });
                    items.push(ScoreItem {
                        doc,
                        terms: self.collection.matched_term_inputs(terms, self.vocab, d),
                    });
                    item_of.insert(d, items.len() - 1);
                }
                pairs.push(Pair {
                    hi: item_of[&pair.hi],
                    lo: item_of[&pair.lo],
                });
            }
        }
        (docs, items, pairs)
    }

    /// One optimizer step over `batch_size` examples split into
    /// `grad_accum` micro-batches; the loss is the mean over all pairs.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let cfg = self.model.config.clone();
        let examples = self.next_examples(cfg.batch_size);
        let total_pairs = examples.len() * 5;
        let chunk = examples.len().div_ceil(cfg.grad_accum).max(1);
        let mut grads: Vec<Tensor> = self
            .model
            .params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        let mut loss_sum = 0.0;
        let mut observations = Vec::new();
        for micro in examples.chunks(chunk) {
            let (docs, items, pairs) = self.batch(micro);
            if items.iter().map(|i| i.terms.len()).sum::<usize>() < 2 {
                continue;
            }
            let mut tape = Tape::with_dropout(ChaCha8Rng::seed_from_u64(self.rng.gen()));
            let out = self.model.forward(&mut tape, &docs, &items, Mode::Train)?;
            let hi: Vec<usize> = pairs.iter().map(|p| p.hi).collect();
            let lo: Vec<usize> = pairs.iter().map(|p| p.lo).collect();
            let s_hi = tape.select(out.item_scores, &hi)?;
            let s_lo = tape.select(out.item_scores, &lo)?;
            let losses = ranknet_loss(&mut tape, s_hi, s_lo)?;
            let sum = tape.sum(losses);
            let loss = tape.scale(sum, 1.0 / total_pairs as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step: self.step + 1 });
            }
            loss_sum += tape.value(sum).item();
            let g = tape.backward(loss)?;
            for (acc, gi) in grads.iter_mut().zip(self.model.params.gradients(&tape, &g)) {
                let merged: Vec<f64> = acc.data().iter().zip(gi.data()).map(|(a, b)| a + b).collect();
                *acc = Tensor::new(acc.shape(), merged)?;
            }
            observations.extend(out.observation);
        }
        adam_step(&self.adam, &mut self.model.params, &grads, &mut self.optimizer)?;
        for obs in &observations {
            self.model.observe(obs);
        }
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss: if total_pairs == 0 {
                0.0
            } else {
                loss_sum / total_pairs as f64
            },
            pairs: total_pairs,
        })
    }

    /// Replaces the running statistics with averages over `batches` fresh
    /// train-mode passes of the current parameters (no dropout, no update).
    pub fn calibrate(&mut self, batches: usize) -> Result<()> {
        let cfg = self.model.config.clone();
        let saved = (self.rng.clone(), self.order.clone(), self.cursor);
        self.rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ca1b);
        let mut seen: Vec<BatchObservation> = Vec::new();
        for _ in 0..batches.max(1) {
            let examples = self.next_examples(cfg.batch_size);
            let (docs, items, _) = self.batch(&examples);
            if items.iter().map(|i| i.terms.len()).sum::<usize>() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let out = self.model.forward(&mut tape, &docs, &items, Mode::Train)?;
            seen.extend(out.observation);
        }
        (self.rng, self.order, self.cursor) = saved;
        if seen.is_empty() {
            return Err(Error::Format(
                "calibration found no query terms occurring in sampled documents".into(),
            ));
        }
        let n = seen.len() as f64;
        let avg = |f: &dyn Fn(&BatchObservation) -> f64| seen.iter().map(f).sum::<f64>() / n;
        let stats = &mut self.model.stats;
        stats.latent = RunningNorm {
            mean: Some(avg(&|o| o.latent.0)),
            var: avg(&|o| o.latent.1),
        };
        stats.explicit = RunningNorm {
            mean: Some(avg(&|o| o.explicit.0)),
            var: avg(&|o| o.explicit.1),
        };
        stats.tf = RunningScale {
            mean: Some(avg(&|o| o.tf)),
        };
        stats.length = RunningScale {
            mean: Some(avg(&|o| o.length)),
        };
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            vocab_hash: self.vocab_hash,
            step: self.step,
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Runs `steps` steps, handing a checkpoint to `emit` every
    /// `checkpoint_every` steps (0 = never) and once at the end after
    /// freezing calibrated statistics. On divergence the error is returned
    /// and nothing further is emitted, so the last emitted checkpoint stays
    /// the last good one.
    pub fn run(&mut self, steps: u64, mut emit: impl FnMut(&Checkpoint) -> Result<()>) -> Result<Vec<StepReport>> {
        let every = self.model.config.checkpoint_every;
        let mut reports = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let r = self.train_step()?;
            tracing::debug!(step = r.step, loss = r.loss, "train step");
            reports.push(r);
            if every > 0 && self.step.is_multiple_of(every) && self.step < steps {
                emit(&self.checkpoint())?;
            }
        }
        let batches = self.model.config.calibration_batches;
        self.calibrate(batches)?;
        emit(&self.checkpoint())?;
        Ok(reports)
    }
}

#[cfg(test)]
#[path = "train_tests.rs"]
mod tests;
