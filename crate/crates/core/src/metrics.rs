//! Ranking metrics: MRR, NDCG@k (exponential gain) and NCG@k.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::trec::{Qrels, Run};

pub const MRR_CUTOFF: usize = 100;
pub const NDCG_K: usize = 10;
pub const NCG_K: usize = 100;

/// Reciprocal rank of the first relevant document within `cutoff`.
pub fn reciprocal_rank(ranked: &[(String, f64)], qrels: &Qrels, qid: &str, cutoff: usize) -> f64 {
    ranked
        .iter()
        .take(cutoff)
        .position(|(d, _)| qrels.relevance(qid, d) >= 1)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

fn dcg(gains: impl Iterator<Item = u32>) -> f64 {
    gains
        .enumerate()
        .map(|(i, rel)| (2f64.powi(rel as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG@k; `None` when the query has no relevant document.
pub fn ndcg(ranked: &[(String, f64)], qrels: &Qrels, qid: &str, k: usize) -> Option<f64> {
    let ideal = dcg(qrels.grades(qid).into_iter().take(k));
    if ideal <= 0.0 {
        return None;
    }
    let got = dcg(ranked.iter().take(k).map(|(d, _)| qrels.relevance(qid, d)));
    Some(got / ideal)
}

/// NCG@k: retrieved gain over the best achievable gain in `k` slots;
/// `None` when the query has no relevant document.
pub fn ncg(ranked: &[(String, f64)], qrels: &Qrels, qid: &str, k: usize) -> Option<f64> {
    let ideal: u64 = qrels.grades(qid).into_iter().take(k).map(u64::from).sum();
    if ideal == 0 {
        return None;
    }
    let got: u64 = ranked
        .iter()
        .take(k)
        .map(|(d, _)| u64::from(qrels.relevance(qid, d)))
        .sum();
    Some(got as f64 / ideal as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryMetrics {
    pub mrr: f64,
    pub ndcg: Option<f64>,
    pub ncg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_query: BTreeMap<String, QueryMetrics>,
    pub mrr: f64,
    pub ndcg: f64,
    pub ncg: f64,
    /// Queries averaged for MRR.
    pub queries: usize,
    /// Queries in the run with no judgments at all.
    pub unjudged: usize,
    /// Queries left out of NDCG/NCG for lack of relevant documents.
    pub no_relevant: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Evaluates every query of the run plus every judged query with a
/// relevant document (an absent query is an empty ranking).
pub fn evaluate(run: &Run, qrels: &Qrels) -> MetricReport {
    let empty = Vec::new();
    let mut qids: BTreeSet<&str> = run.keys().map(String::as_str).collect();
    qids.extend(qrels.queries().filter(|q| !qrels.grades(q).is_empty()));
    let mut per_query = BTreeMap::new();
    let mut unjudged = 0;
    for qid in qids {
        let ranked = run.get(qid).unwrap_or(&empty);
        if !qrels.contains_query(qid) {
            tracing::warn!(qid, "query has no judgments; counted as 0");
            unjudged += 1;
        }
        per_query.insert(
            qid.to_string(),
            QueryMetrics {
                mrr: reciprocal_rank(ranked, qrels, qid, MRR_CUTOFF),
                ndcg: ndcg(ranked, qrels, qid, NDCG_K),
                ncg: ncg(ranked, qrels, qid, NCG_K),
            },
        );
    }
    let no_relevant = per_query.values().filter(|m| m.ndcg.is_none()).count();
    if no_relevant > 0 {
        tracing::warn!(no_relevant, "queries without relevant documents excluded from NDCG/NCG");
    }
    MetricReport {
        mrr: mean(per_query.values().map(|m| m.mrr)),
        ndcg: mean(per_query.values().filter_map(|m| m.ndcg)),
        ncg: mean(per_query.values().filter_map(|m| m.ncg)),
        queries: per_query.len(),
        unjudged,
        no_relevant,
        per_query,
    }
}

/// Mean reciprocal rank over the evaluated queries.
pub fn mrr(run: &Run, qrels: &Qrels) -> f64 {
    evaluate(run, qrels).mrr
}

impl MetricReport {
    /// Aligned per-query table followed by the means.
    pub fn to_table(&self) -> String {
        let width = self
            .per_query
            .keys()
            .map(String::len)
            .chain(["query".len(), "all".len()])
            .max()
            .unwrap_or(5);
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}  {:>8}",
            "query", "MRR@100", "NDCG@10", "NCG@100"
        );
        for (q, m) in &self.per_query {
            let _ = writeln!(
                out,
                "{q:<width$}  {:>8.4}  {:>8}  {:>8}",
                m.mrr,
                opt(m.ndcg),
                opt(m.ncg)
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}",
            "all", self.mrr, self.ndcg, self.ncg
        );
        out
    }

    /// `key=value` lines for scripts.
    pub fn to_key_values(&self) -> String {
        format!(
            "mrr@100={:.6}\nndcg@10={:.6}\nncg@100={:.6}\nqueries={}\nunjudged={}\nno_relevant={}\n",
            self.mrr, self.ndcg, self.ncg, self.queries, self.unjudged, self.no_relevant
        )
    }
}
