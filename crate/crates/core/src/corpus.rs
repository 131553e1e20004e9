//! Corpus ingestion and collection statistics.
//!
//! Corpus lines are `docid<TAB>url<TAB>title<TAB>body[<TAB>extra]`. The
//! document text is title and body followed by the (capped) extra field.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DocInput, TermInput};
use crate::scorer;
use crate::text::{self, TokenSequence, Vocabulary};

/// Lines dropped during ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SkipReport {
    pub skipped: usize,
    /// `(line number, reason)` of the first few skipped lines.
    pub examples: Vec<(usize, String)>,
}

impl SkipReport {
    const KEEP: usize = 20;

    fn skip(&mut self, line: usize, reason: &str) {
        tracing::warn!(line, reason, "skipping corpus line");
        self.skipped += 1;
        if self.examples.len() < Self::KEEP {
            self.examples.push((line, reason.to_string()));
        }
    }
}

/// Document store plus the statistics of the explicit channel: document
/// count, per-term document frequency, per-document length and term counts.
/// Every raw term is kept, in or out of any model vocabulary.
#[derive(Debug, Clone, Default)]
pub struct Collection {
    docids: Vec<String>,
    positions: HashMap<String, usize>,
    lexicon: Vec<String>,
    lexicon_ids: HashMap<String, u32>,
    df: Vec<u64>,
    docs: Vec<Vec<u32>>,
    /// `(lexicon id, count)` sorted by id.
    counts: Vec<Vec<(u32, u32)>>,
}

impl Collection {
    pub fn ingest(path: &Path, max_extra_terms: usize) -> Result<(Self, SkipReport)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::ingest_reader(std::io::BufReader::new(file), max_extra_terms).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    /// Single streaming pass over corpus lines.
    pub fn ingest_reader(reader: impl BufRead, max_extra_terms: usize) -> Result<(Self, SkipReport)> {
        let mut c = Self::default();
        let mut report = SkipReport::default();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io("<corpus>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 4 {
                report.skip(lineno, "fewer than 4 columns");
                continue;
            }
            if fields.len() > 5 {
                report.skip(lineno, "more than 5 columns");
                continue;
            }
            let docid = fields[0].trim();
            if docid.is_empty() {
                report.skip(lineno, "empty document id");
                continue;
            }
            let mut terms = text::tokenize(fields[2]);
            terms.extend(text::tokenize(fields[3]));
            if let Some(extra) = fields.get(4) {
                terms.extend(text::tokenize(extra).into_iter().take(max_extra_terms));
            }
            if terms.is_empty() {
                report.skip(lineno, "no terms");
                continue;
            }
            c.push(docid, &terms)?;
        }
        if c.docids.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok((c, report))
    }

    /// Builds a collection from `(docid, text)` pairs.
    pub fn from_texts<'a>(docs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = Self::default();
        for (id, body) in docs {
            c.push(id, &text::tokenize(body))?;
        }
        if c.docids.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(c)
    }

    fn push(&mut self, docid: &str, terms: &[String]) -> Result<()> {
        if self.positions.contains_key(docid) {
            return Err(Error::DuplicateDocId(docid.to_string()));
        }
        if terms.is_empty() {
            return Err(Error::Contract(format!("document `{docid}` has no terms")));
        }
        let ids: Vec<u32> = terms
            .iter()
            .map(|t| match self.lexicon_ids.get(t) {
                Some(id) => *id,
                None => {
                    let id = self.lexicon.len() as u32;
                    self.lexicon.push(t.clone());
                    self.lexicon_ids.insert(t.clone(), id);
                    self.df.push(0);
                    id
                }
            })
            .collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        let mut counts: Vec<(u32, u32)> = Vec::new();
        for id in sorted {
            match counts.last_mut() {
                Some((last, n)) if *last == id => *n += 1,
                _ => counts.push((id, 1)),
            }
        }
        for (id, _) in &counts {
            self.df[*id as usize] += 1;
        }
        self.positions.insert(docid.to_string(), self.docids.len());
        self.docids.push(docid.to_string());
        self.docs.push(ids);
        self.counts.push(counts);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.docids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docids.is_empty()
    }

    pub fn num_docs(&self) -> u64 {
        self.docids.len() as u64
    }

    pub fn docid(&self, doc: usize) -> &str {
        &self.docids[doc]
    }

    pub fn docids(&self) -> &[String] {
        &self.docids
    }

    pub fn position(&self, docid: &str) -> Option<usize> {
        self.positions.get(docid).copied()
    }

    pub fn require(&self, docid: &str) -> Result<usize> {
        self.position(docid)
            .ok_or_else(|| Error::UnknownDocId(docid.to_string()))
    }

    /// Untruncated number of terms.
    pub fn doc_len(&self, doc: usize) -> usize {
        self.docs[doc].len()
    }

    pub fn terms(&self, doc: usize) -> impl Iterator<Item = &str> {
        self.docs[doc].iter().map(|id| self.lexicon[*id as usize].as_str())
    }

    /// Distinct terms of a document with their counts, in lexicon order.
    pub fn term_counts(&self, doc: usize) -> impl Iterator<Item = (&str, u32)> {
        self.counts[doc]
            .iter()
            .map(|(id, n)| (self.lexicon[*id as usize].as_str(), *n))
    }

    pub fn df(&self, term: &str) -> u64 {
        self.lexicon_ids.get(term).map_or(0, |id| self.df[*id as usize])
    }

    pub fn tf(&self, doc: usize, term: &str) -> u32 {
        let Some(id) = self.lexicon_ids.get(term) else {
            return 0;
        };
        let counts = &self.counts[doc];
        counts.binary_search_by_key(id, |(t, _)| *t).map_or(0, |i| counts[i].1)
    }

    pub fn idf(&self, term: &str) -> f64 {
        scorer::idf(self.num_docs(), self.df(term))
    }

    pub fn vocabulary(&self, min_df: u64) -> Result<Vocabulary> {
        Vocabulary::build((0..self.len()).map(|d| self.terms(d)), min_df)
    }

    pub fn doc_input(&self, doc: usize, vocab: &Vocabulary, max_len: usize) -> DocInput {
        let ids = self.terms(doc).take(max_len).map(|t| vocab.id(t)).collect();
        DocInput {
            tokens: TokenSequence::new(ids, max_len),
            length: self.doc_len(doc) as f64,
        }
    }

    /// Scorer inputs for `terms` against `doc`, one per query occurrence.
    pub fn term_inputs<S: AsRef<str>>(&self, terms: &[S], vocab: &Vocabulary, doc: usize) -> Vec<TermInput> {
        terms
            .iter()
            .map(|t| {
                let t = t.as_ref();
                TermInput {
                    id: vocab.id(t),
                    idf: self.idf(t),
                    tf: self.tf(doc, t) as f64,
                }
            })
            .collect()
    }

    /// Like [`Self::term_inputs`], keeping only in-vocabulary terms that occur
    /// in `doc`; these are exactly the pairs an impact index holds.
    pub fn matched_term_inputs<S: AsRef<str>>(&self, terms: &[S], vocab: &Vocabulary, doc: usize) -> Vec<TermInput> {
        terms
            .iter()
            .filter(|t| vocab.get(t.as_ref()).is_some() && self.tf(doc, t.as_ref()) > 0)
            .map(|t| {
                let t = t.as_ref();
                TermInput {
                    id: vocab.id(t),
                    idf: self.idf(t),
                    tf: self.tf(doc, t) as f64,
                }
            })
            .collect()
    }
}

/// Reads `qid<TAB>text` lines into `(qid, text)` in file order.
pub fn read_queries(path: &Path) -> Result<Vec<(String, String)>> {
    read_pairs(path, "query")
}

/// Reads `qid<TAB>docid` positive training pairs.
pub fn read_training_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    read_pairs(path, "training pair")
}

fn read_pairs(path: &Path, what: &str) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, what)
}

pub fn parse_pairs(text: &str, what: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("{what} line {}: expected two tab-separated fields", i + 1)))?;
        if a.trim().is_empty() {
            return Err(Error::Format(format!("{what} line {}: empty id", i + 1)));
        }
        out.push((a.trim().to_string(), b.trim().to_string()));
    }
    Ok(out)
}
