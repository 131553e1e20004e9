//! JSON bodies of the search service.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::index::SearchIndex;
use crate::metrics::MetricReport;
use crate::trec::Run;

pub const DEFAULT_K: usize = 100;

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub documents: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexInfo {
    pub documents: u64,
    pub terms: usize,
    pub postings: usize,
    /// Hex digests.
    pub vocab_hash: String,
    pub checkpoint_hash: String,
    pub max_query_terms: usize,
    pub qrels_loaded: bool,
}

impl IndexInfo {
    pub fn of(index: &SearchIndex, qrels_loaded: bool) -> Self {
        Self {
            documents: index.index.num_docs,
            terms: index.index.num_terms(),
            postings: index.index.num_postings(),
            vocab_hash: format!("{:016x}", index.index.vocab_hash),
            checkpoint_hash: format!("{:016x}", index.index.checkpoint_hash),
            max_query_terms: index.max_query_terms,
            qrels_loaded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    #[serde(default = "default_k")]
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub docid: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub hits: Vec<Hit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchQuery {
    pub qid: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSearchRequest {
    pub queries: Vec<BatchQuery>,
    #[serde(default = "default_k")]
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSearchResponse {
    pub results: BTreeMap<String, Vec<Hit>>,
}

pub fn hits(list: Vec<(String, f64)>) -> Vec<Hit> {
    list.into_iter().map(|(docid, score)| Hit { docid, score }).collect()
}

impl BatchSearchResponse {
    pub fn from_run(run: Run) -> Self {
        Self {
            results: run.into_iter().map(|(q, l)| (q, hits(l))).collect(),
        }
    }

    pub fn into_run(self) -> Run {
        self.results
            .into_iter()
            .map(|(q, l)| (q, l.into_iter().map(|h| (h.docid, h.score)).collect()))
            .collect()
    }
}

/// A TREC run as text, judged against `qrels` text or the qrels the service
/// was started with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub run: String,
    #[serde(default)]
    pub qrels: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub mrr: f64,
    pub ndcg: Option<f64>,
    pub ncg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub mrr: f64,
    pub ndcg: f64,
    pub ncg: f64,
    pub queries: usize,
    pub unjudged: usize,
    pub no_relevant: usize,
    pub per_query: BTreeMap<String, QueryScores>,
}

impl From<MetricReport> for EvalResponse {
    fn from(r: MetricReport) -> Self {
        Self {
            mrr: r.mrr,
            ndcg: r.ndcg,
            ncg: r.ncg,
            queries: r.queries,
            unjudged: r.unjudged,
            no_relevant: r.no_relevant,
            per_query: r
                .per_query
                .into_iter()
                .map(|(q, m)| {
                    (
                        q,
                        QueryScores {
                            mrr: m.mrr,
                            ndcg: m.ndcg,
                            ncg: m.ncg,
                        },
                    )
                })
                .collect(),
        }
    }
}

impl From<EvalResponse> for MetricReport {
    fn from(r: EvalResponse) -> Self {
        Self {
            mrr: r.mrr,
            ndcg: r.ndcg,
            ncg: r.ncg,
            queries: r.queries,
            unjudged: r.unjudged,
            no_relevant: r.no_relevant,
            per_query: r
                .per_query
                .into_iter()
                .map(|(q, m)| {
                    (
                        q,
                        crate::metrics::QueryMetrics {
                            mrr: m.mrr,
                            ndcg: m.ndcg,
                            ncg: m.ncg,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
