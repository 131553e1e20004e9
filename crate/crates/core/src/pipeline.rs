//! File-level steps shared by the command line and the service.

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::corpus::Collection;
use crate::error::Result;
use crate::index::{precompute_impacts, SearchIndex};
use crate::metrics::{self, MetricReport};
use crate::model::CkModel;
use crate::text::Vocabulary;
use crate::train::{StepReport, Trainer, TrainingData};
use crate::trec::{Qrels, Run};

/// Everything training reads besides the config.
pub struct TrainingInputs<'a> {
    pub collection: &'a Collection,
    pub queries: &'a [(String, String)],
    pub pairs: &'a [(String, String)],
    pub candidates: &'a Run,
}

pub struct Prepared {
    pub vocab: Vocabulary,
    pub data: TrainingData,
    pub dropped_pairs: usize,
}

pub fn prepare(config: &Config, inputs: &TrainingInputs) -> Result<Prepared> {
    config.validate()?;
    let vocab = inputs.collection.vocabulary(config.min_df)?;
    let (data, dropped_pairs) = TrainingData::new(
        inputs.collection,
        inputs.queries,
        inputs.pairs,
        inputs.candidates,
        config.max_query_terms,
    )?;
    Ok(Prepared {
        vocab,
        data,
        dropped_pairs,
    })
}

/// Trains for `config.steps` steps; `emit` sees periodic checkpoints and the
/// final one, which is also returned.
pub fn train(
    config: &Config,
    inputs: &TrainingInputs,
    emit: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, Vec<StepReport>)> {
    let prep = prepare(config, inputs)?;
    let model = CkModel::new(config, prep.vocab.len())?;
    let mut trainer = Trainer::new(model, &prep.data, inputs.collection, &prep.vocab);
    let reports = trainer.run(config.steps, emit)?;
    Ok((trainer.checkpoint(), reports))
}

/// Freshly initialized model with calibrated statistics and no updates.
pub fn untrained(config: &Config, inputs: &TrainingInputs) -> Result<Checkpoint> {
    let prep = prepare(config, inputs)?;
    let model = CkModel::new(config, prep.vocab.len())?;
    let mut trainer = Trainer::new(model, &prep.data, inputs.collection, &prep.vocab);
    trainer.calibrate(config.calibration_batches)?;
    Ok(trainer.checkpoint())
}

/// Impact index over `collection` with its vocabulary and document ids.
pub fn build_index(ck: &Checkpoint, collection: &Collection, threads: usize) -> Result<SearchIndex> {
    let vocab = collection.vocabulary(ck.model.config.min_df)?;
    let index = precompute_impacts(ck, collection, &vocab, threads)?;
    SearchIndex::new(
        index,
        vocab,
        collection.docids().to_vec(),
        ck.model.config.max_query_terms,
    )
}

/// Runs the queries against the index and evaluates the result.
pub fn search_and_evaluate(
    index: &SearchIndex,
    queries: &[(String, String)],
    qrels: &Qrels,
    k: usize,
) -> (Run, MetricReport) {
    let run = index.search_all(queries, k);
    let report = metrics::evaluate(&run, qrels);
    (run, report)
}
