//! TREC run files (`qid Q0 docid rank score tag`) and qrels
//! (`qid 0 docid rel`).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Ranked `(docid, score)` lists keyed by query id, best first.
pub type Run = BTreeMap<String, Vec<(String, f64)>>;

/// Graded judgments; absent pairs have relevance 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, HashMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: &str, docid: &str, rel: u32) {
        self.judgments
            .entry(qid.to_string())
            .or_default()
            .insert(docid.to_string(), rel);
    }

    pub fn relevance(&self, qid: &str, docid: &str) -> u32 {
        self.judgments.get(qid).and_then(|m| m.get(docid)).copied().unwrap_or(0)
    }

    pub fn contains_query(&self, qid: &str) -> bool {
        self.judgments.contains_key(qid)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    /// Relevance grades of one query, best first.
    pub fn grades(&self, qid: &str) -> Vec<u32> {
        let mut g: Vec<u32> = self
            .judgments
            .get(qid)
            .map(|m| m.values().copied().filter(|r| *r > 0).collect())
            .unwrap_or_default();
        g.sort_unstable_by(|a, b| b.cmp(a));
        g
    }

    /// Documents with relevance ≥ 1, sorted.
    pub fn relevant(&self, qid: &str) -> Vec<&str> {
        let mut docs: Vec<&str> = self
            .judgments
            .get(qid)
            .map(|m| m.iter().filter(|(_, r)| **r > 0).map(|(d, _)| d.as_str()).collect())
            .unwrap_or_default();
        docs.sort_unstable();
        docs
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut q = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("qrels line {}: expected 4 fields", i + 1)));
            }
            let rel: i64 = f[3]
                .parse()
                .map_err(|_| Error::Format(format!("qrels line {}: bad relevance `{}`", i + 1, f[3])))?;
            q.insert(f[0], f[2], rel.max(0) as u32);
        }
        Ok(q)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Lines sorted by qid then docid.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (qid, docs) in &self.judgments {
            let mut d: Vec<_> = docs.iter().collect();
            d.sort();
            for (docid, rel) in d {
                let _ = writeln!(out, "{qid} 0 {docid} {rel}");
            }
        }
        out
    }
}

/// Serializes a run; queries in key order, ranks from 1.
pub fn format_run(run: &Run, tag: &str) -> String {
    let mut out = String::new();
    for (qid, list) in run {
        for (rank, (docid, score)) in list.iter().enumerate() {
            let _ = writeln!(out, "{qid} Q0 {docid} {} {score:.9} {tag}", rank + 1);
        }
    }
    out
}

pub fn write_run(path: &Path, run: &Run, tag: &str) -> Result<()> {
    std::fs::write(path, format_run(run, tag)).map_err(|e| Error::io(path, e))
}

/// Parses a run, ordering each query's list by its rank column.
pub fn parse_run(text: &str) -> Result<Run> {
    let mut ranked: BTreeMap<String, Vec<(u64, String, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (qid, docid, rank, score) = parse_run_line(line, i + 1)?;
        ranked.entry(qid).or_default().push((rank, docid, score));
    }
    Ok(ranked
        .into_iter()
        .map(|(q, mut v)| {
            v.sort_by_key(|(r, _, _)| *r);
            (q, v.into_iter().map(|(_, d, s)| (d, s)).collect())
        })
        .collect())
}

pub fn read_run(path: &Path) -> Result<Run> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run(&text)
}

fn parse_run_line(line: &str, lineno: usize) -> Result<(String, String, u64, f64)> {
    let f: Vec<&str> = line.split(' ').collect();
    let bad = |what: &str| Error::Format(format!("run line {lineno}: {what}"));
    if f.len() != 6 || f.iter().any(|x| x.is_empty()) {
        return Err(bad("expected 6 space-separated fields"));
    }
    if f[1] != "Q0" {
        return Err(bad("second field must be Q0"));
    }
    let rank: u64 = f[3].parse().map_err(|_| bad("rank is not a positive integer"))?;
    if rank == 0 {
        return Err(bad("rank starts at 1"));
    }
    let score: f64 = f[4].parse().map_err(|_| bad("score is not a number"))?;
    if !score.is_finite() {
        return Err(bad("score is not finite"));
    }
    Ok((f[0].to_string(), f[2].to_string(), rank, score))
}

/// Strict format check of run text: six single-space-separated fields,
/// ranks `1..` consecutive per query, scores non-increasing with rank, no
/// repeated document within a query. Returns the number of lines.
pub fn validate_run(text: &str) -> Result<usize> {
    let mut last: HashMap<String, (u64, f64)> = HashMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut n = 0;
    for (i, line) in text.lines().enumerate() {
        let (qid, docid, rank, score) = parse_run_line(line, i + 1)?;
        let bad = |what: &str| Error::Format(format!("run line {}: {what}", i + 1));
        let expected = last.get(&qid).map_or(1, |(r, _)| r + 1);
        if rank != expected {
            return Err(bad(&format!("rank {rank} where {expected} was expected")));
        }
        if last.get(&qid).is_some_and(|(_, s)| score > *s) {
            return Err(bad("score increases with rank"));
        }
        if !seen.insert((qid.clone(), docid)) {
            return Err(bad("document repeated within query"));
        }
        last.insert(qid, (rank, score));
        n += 1;
    }
    Ok(n)
}
