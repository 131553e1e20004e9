//! Seeded synthetic collection with topical term clusters, plus the BM25
//! candidate run used as training negatives.
//!
//! Every document belongs to one cluster and mixes that cluster's terms with
//! background terms. Some documents also repeat a single term of a foreign
//! cluster several times, which fools pure term-count scoring but not a
//! scorer that looks at the surrounding terms.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Collection, SkipReport};
use crate::error::{Error, Result};
use crate::scorer;
use crate::text;
use crate::trec::{self, Qrels, Run};

pub const CORPUS_FILE: &str = "corpus.tsv";
pub const QUERIES_FILE: &str = "queries.tsv";
pub const QRELS_FILE: &str = "qrels.txt";
pub const TRAIN_QUERIES_FILE: &str = "train_queries.tsv";
pub const TRAIN_PAIRS_FILE: &str = "train_pairs.tsv";
pub const CANDIDATES_FILE: &str = "candidates.run";

pub const BM25_K1: f64 = 0.9;
pub const BM25_B: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub docs: usize,
    /// Distinct terms across clusters and background.
    pub vocab: usize,
    pub eval_queries: usize,
    pub train_queries: usize,
    pub docs_per_cluster: usize,
    /// Share of document tokens drawn from the document's own cluster.
    pub topical_share: f64,
    /// Probability that a document carries a repeated foreign term.
    pub distractor_rate: f64,
    pub candidates_depth: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            docs: 500,
            vocab: 1000,
            eval_queries: 50,
            train_queries: 300,
            docs_per_cluster: 20,
            topical_share: 0.3,
            distractor_rate: 0.5,
            candidates_depth: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthDoc {
    pub docid: String,
    pub url: String,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub docs: Vec<SynthDoc>,
    pub queries: Vec<(String, String)>,
    pub qrels: Qrels,
    pub train_queries: Vec<(String, String)>,
    pub train_pairs: Vec<(String, String)>,
    /// BM25 top lists of the training queries.
    pub candidates: Run,
}

fn cluster_term(c: usize, j: usize) -> String {
    format!("topic{c}w{j}")
}

fn background_term(i: usize) -> String {
    format!("common{i}")
}

/// Zipf-like index in `0..n`.
fn zipf(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let u: f64 = rng.gen();
    (((n as f64 + 1.0).powf(u) - 1.0) as usize).min(n - 1)
}

struct Layout {
    clusters: usize,
    per_cluster: usize,
    background: usize,
}

impl Layout {
    fn new(cfg: &SynthConfig) -> Self {
        let clusters = (cfg.docs / cfg.docs_per_cluster.max(1)).max(2);
        let per_cluster = (cfg.vocab / 2 / clusters).max(4);
        let background = cfg.vocab.saturating_sub(clusters * per_cluster).max(10);
        Self {
            clusters,
            per_cluster,
            background,
        }
    }
}

fn make_doc(cfg: &SynthConfig, lay: &Layout, d: usize, rng: &mut ChaCha8Rng) -> (usize, SynthDoc) {
    let cluster = d % lay.clusters;
    let len = rng.gen_range(20..60);
    let mut tokens: Vec<String> = (0..len)
        .map(|_| {
            if rng.gen_bool(cfg.topical_share) {
                cluster_term(cluster, rng.gen_range(0..lay.per_cluster))
            } else {
                background_term(zipf(rng, lay.background))
            }
        })
        .collect();
    if rng.gen_bool(cfg.distractor_rate) {
        let other = (cluster + rng.gen_range(1..lay.clusters)) % lay.clusters;
        let term = cluster_term(other, rng.gen_range(0..lay.per_cluster));
        for _ in 0..rng.gen_range(3..7) {
            let at = rng.gen_range(0..=tokens.len());
            tokens.insert(at, term.clone());
        }
    }
    let docid = format!("D{d:05}");
    let body = tokens.split_off(4.min(tokens.len()));
    (
        cluster,
        SynthDoc {
            url: format!("http://synthetic.example/{docid}"),
            title: tokens.join(" "),
            body: body.join(" "),
            docid,
        },
    )
}

fn make_query(lay: &Layout, cluster: usize, rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=2);
    let mut picks: Vec<usize> = (0..lay.per_cluster).collect();
    picks.shuffle(rng);
    picks[..n]
        .iter()
        .map(|j| cluster_term(cluster, *j))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates documents, evaluation queries with qrels, and training queries
/// with one positive each and BM25 candidates. Deterministic per config.
pub fn make_synthetic_corpus(cfg: &SynthConfig) -> Result<SyntheticSet> {
    if cfg.docs == 0 || cfg.vocab == 0 || cfg.eval_queries == 0 {
        return Err(Error::Config(
            "synthetic corpus needs documents, terms and queries".into(),
        ));
    }
    let lay = Layout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clusters = Vec::with_capacity(cfg.docs);
    let mut docs = Vec::with_capacity(cfg.docs);
    for d in 0..cfg.docs {
        let (c, doc) = make_doc(cfg, &lay, d, &mut rng);
        clusters.push(c);
        docs.push(doc);
    }
    let mut set = SyntheticSet {
        docs,
        queries: Vec::new(),
        qrels: Qrels::new(),
        train_queries: Vec::new(),
        train_pairs: Vec::new(),
        candidates: Run::new(),
    };
    let collection = set.collection()?.0;
    let clusters = &clusters;
    let members = |c: usize| (0..cfg.docs).filter(move |d| clusters[*d] == c);

    for i in 0..cfg.eval_queries {
        let c = rng.gen_range(0..lay.clusters.min(cfg.docs));
        let qid = format!("q{i}");
        let text = make_query(&lay, c, &mut rng);
        let terms = text::tokenize(&text);
        for d in members(c) {
            let all = terms.iter().all(|t| collection.tf(d, t) > 0);
            set.qrels.insert(&qid, &set.docs[d].docid, if all { 2 } else { 1 });
        }
        set.queries.push((qid, text));
    }
    for i in 0..cfg.train_queries {
        let c = rng.gen_range(0..lay.clusters.min(cfg.docs));
        let qid = format!("t{i}");
        let text = make_query(&lay, c, &mut rng);
        let terms = text::tokenize(&text);
        let matching: Vec<usize> = members(c)
            .filter(|d| terms.iter().any(|t| collection.tf(*d, t) > 0))
            .collect();
        if let Some(d) = matching.choose(&mut rng) {
            set.train_pairs.push((qid.clone(), set.docs[*d].docid.clone()));
        }
        set.train_queries.push((qid, text));
    }
    set.candidates = bm25_run(&collection, &set.train_queries, cfg.candidates_depth);
    Ok(set)
}

impl SyntheticSet {
    /// `docid<TAB>url<TAB>title<TAB>body` lines.
    pub fn corpus_tsv(&self) -> String {
        let mut out = String::new();
        for d in &self.docs {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", d.docid, d.url, d.title, d.body);
        }
        out
    }

    pub fn collection(&self) -> Result<(Collection, SkipReport)> {
        Collection::ingest_reader(self.corpus_tsv().as_bytes(), usize::MAX)
    }

    /// Writes all files into `dir` (created if missing).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pairs = |rows: &[(String, String)]| {
            rows.iter().fold(String::new(), |mut s, (a, b)| {
                let _ = writeln!(s, "{a}\t{b}");
                s
            })
        };
        let files = [
            (CORPUS_FILE, self.corpus_tsv()),
            (QUERIES_FILE, pairs(&self.queries)),
            (QRELS_FILE, self.qrels.to_text()),
            (TRAIN_QUERIES_FILE, pairs(&self.train_queries)),
            (TRAIN_PAIRS_FILE, pairs(&self.train_pairs)),
            (CANDIDATES_FILE, trec::format_run(&self.candidates, "bm25")),
        ];
        for (name, text) in files {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Okapi BM25 with the model's IDF; ties by ascending document position.
pub fn bm25_score<S: AsRef<str>>(collection: &Collection, query: &[S], doc: usize, avg_len: f64) -> f64 {
    let len = collection.doc_len(doc) as f64;
    query
        .iter()
        .map(|t| {
            let t = t.as_ref();
            let tf = f64::from(collection.tf(doc, t));
            if tf == 0.0 {
                return 0.0;
            }
            let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * len / avg_len);
            scorer::idf(collection.num_docs(), collection.df(t)) * tf * (BM25_K1 + 1.0) / (tf + norm)
        })
        .sum()
}

/// Top-`depth` BM25 documents (with at least one query term) per query.
pub fn bm25_run(collection: &Collection, queries: &[(String, String)], depth: usize) -> Run {
    let avg_len =
        (0..collection.len()).map(|d| collection.doc_len(d) as f64).sum::<f64>() / collection.len().max(1) as f64;
    queries
        .iter()
        .map(|(qid, text)| {
            let terms = text::tokenize(text);
            let mut scored: Vec<(usize, f64)> = (0..collection.len())
                .map(|d| (d, bm25_score(collection, &terms, d, avg_len)))
                .filter(|(_, s)| *s > 0.0)
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.truncate(depth);
            let list = scored
                .into_iter()
                .map(|(d, s)| (collection.docid(d).to_string(), s))
                .collect();
            (qid.clone(), list)
        })
        .collect()
}
