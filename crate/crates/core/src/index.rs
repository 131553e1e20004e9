//! Impact index: per-term postings of precomputed `s_{t,d}`, top-k retrieval
//! by document-at-a-time accumulation, and the exhaustive oracle it must
//! agree with.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use crate::binio::{Reader, Writer};
use crate::checkpoint::Checkpoint;
use crate::corpus::Collection;
use crate::error::{Error, Result};
use crate::model::{CkModel, ScoreItem, TermInput};
use crate::text::{self, Vocabulary, OOV_ID, PAD_ID};
use crate::trec::Run;

pub const INDEX_MAGIC: &[u8; 6] = b"CKIDX1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posting {
    pub doc: u32,
    pub impact: f32,
}

/// Term id to impact-sorted postings, plus the identity of the vocabulary
/// and checkpoint that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactIndex {
    pub num_docs: u64,
    pub vocab_hash: u64,
    pub checkpoint_hash: u64,
    postings: BTreeMap<u32, Vec<Posting>>,
    by_doc: HashMap<u32, Vec<Posting>>,
}

/// Descending impact, then ascending document.
fn impact_order(a: &Posting, b: &Posting) -> Ordering {
    b.impact.total_cmp(&a.impact).then(a.doc.cmp(&b.doc))
}

impl ImpactIndex {
    /// Sorts every list by impact and builds the document-ordered views used
    /// for retrieval.
    pub fn from_postings(
        num_docs: u64,
        vocab_hash: u64,
        checkpoint_hash: u64,
        mut postings: BTreeMap<u32, Vec<Posting>>,
    ) -> Self {
        let mut by_doc = HashMap::with_capacity(postings.len());
        for (term, list) in &mut postings {
            list.sort_by(impact_order);
            let mut sorted = list.clone();
            sorted.sort_by_key(|p| p.doc);
            by_doc.insert(*term, sorted);
        }
        Self {
            num_docs,
            vocab_hash,
            checkpoint_hash,
            postings,
            by_doc,
        }
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn num_postings(&self) -> usize {
        self.postings.values().map(Vec::len).sum()
    }

    /// Postings of `term`, highest impact first.
    pub fn postings(&self, term: u32) -> Option<&[Posting]> {
        self.postings.get(&term).map(Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = u32> + '_ {
        self.postings.keys().copied()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(INDEX_MAGIC);
        w.u64(self.num_docs);
        w.u64(self.vocab_hash);
        w.u64(self.checkpoint_hash);
        w.u64(self.postings.len() as u64);
        for (term, list) in &self.postings {
            w.u32(*term);
            w.u32(list.len() as u32);
            for p in list {
                w.u32(p.doc);
                w.f32(p.impact);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "index");
        if r.take(INDEX_MAGIC.len()).ok() != Some(INDEX_MAGIC.as_slice()) {
            return Err(Error::Format("not an impact index (bad magic)".into()));
        }
        let num_docs = r.u64()?;
        let vocab_hash = r.u64()?;
        let checkpoint_hash = r.u64()?;
        let terms = r.u64()?;
        let bad = |msg: String| Error::Format(format!("index: {msg}"));
        let mut postings = BTreeMap::new();
        let mut prev_term = None;
        for _ in 0..terms {
            let term = r.u32()?;
            if prev_term.is_some_and(|p| p >= term) {
                return Err(bad(format!("term {term} out of order")));
            }
            prev_term = Some(term);
            let count = r.u32()? as usize;
            let mut list = Vec::with_capacity(count.min(bytes.len() / 8));
            for _ in 0..count {
                let p = Posting {
                    doc: r.u32()?,
                    impact: r.f32()?,
                };
                if u64::from(p.doc) >= num_docs || !p.impact.is_finite() {
                    return Err(bad(format!("invalid posting for term {term}")));
                }
                if list.last().is_some_and(|q| impact_order(q, &p) != Ordering::Less) {
                    return Err(bad(format!("postings of term {term} not impact-sorted")));
                }
                list.push(p);
            }
            postings.insert(term, list);
        }
        r.finish()?;
        Ok(Self::from_postings(num_docs, vocab_hash, checkpoint_hash, postings))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses an index built from a different checkpoint.
    pub fn check_checkpoint(&self, checkpoint_hash: u64) -> Result<()> {
        if self.checkpoint_hash != checkpoint_hash {
            return Err(Error::HashMismatch {
                what: "index was built with a different checkpoint",
                expected: checkpoint_hash,
                found: self.checkpoint_hash,
            });
        }
        Ok(())
    }

    /// Top `k` documents for query term ids (repeats count once per
    /// occurrence; padding and OOV ids are ignored). Ties go to the lower
    /// document number; best first.
    pub fn retrieve_topk(&self, query: &[u32], k: usize) -> Vec<(u32, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut mult: BTreeMap<u32, f64> = BTreeMap::new();
        for &t in query {
            if t != PAD_ID && t != OOV_ID {
                *mult.entry(t).or_default() += 1.0;
            }
        }
        let lists: Vec<(&[Posting], f64)> = mult
            .iter()
            .filter_map(|(t, m)| self.by_doc.get(t).map(|l| (l.as_slice(), *m)))
            .collect();
        let mut cursors = vec![0usize; lists.len()];
        let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(k + 1);
        loop {
            let next = lists
                .iter()
                .zip(&cursors)
                .filter_map(|((l, _), &c)| l.get(c).map(|p| p.doc))
                .min();
            let Some(doc) = next else { break };
            let mut score = 0.0;
            for ((list, m), c) in lists.iter().zip(cursors.iter_mut()) {
                if let Some(p) = list.get(*c).filter(|p| p.doc == doc) {
                    score += m * f64::from(p.impact);
                    *c += 1;
                }
            }
            let cand = Worst { score, doc };
            if heap.len() < k {
                heap.push(cand);
            } else if heap.peek().is_some_and(|top| cand < *top) {
                heap.pop();
                heap.push(cand);
            }
        }
        let mut out: Vec<Worst> = heap.into_vec();
        out.sort();
        out.into_iter().map(|w| (w.doc, w.score)).collect()
    }
}

/// Heap entry ordered so the greatest is the weakest result.
#[derive(Debug, Clone, Copy)]
struct Worst {
    score: f64,
    doc: u32,
}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then(self.doc.cmp(&other.doc))
    }
}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Worst {}

fn check_vocab(ck: &Checkpoint, vocab: &Vocabulary) -> Result<()> {
    if ck.vocab_hash != vocab.hash() {
        return Err(Error::HashMismatch {
            what: "vocabulary differs from the one the checkpoint was trained with",
            expected: ck.vocab_hash,
            found: vocab.hash(),
        });
    }
    if ck.model.vocab_size() != vocab.len() {
        return Err(Error::Format(format!(
            "checkpoint embeds {} ids, vocabulary has {}",
            ck.model.vocab_size(),
            vocab.len()
        )));
    }
    if !ck.model.stats.is_initialized() {
        return Err(Error::UninitializedStats);
    }
    Ok(())
}

/// Distinct in-vocabulary terms of `doc` with their impacts.
fn doc_impacts(model: &CkModel, collection: &Collection, vocab: &Vocabulary, doc: usize) -> Result<Vec<(u32, f32)>> {
    let mut terms: Vec<TermInput> = collection
        .term_counts(doc)
        .filter_map(|(t, c)| {
            vocab.get(t).map(|id| TermInput {
                id,
                idf: collection.idf(t),
                tf: f64::from(c),
            })
        })
        .collect();
    if terms.is_empty() {
        return Ok(Vec::new());
    }
    terms.sort_by_key(|t| t.id);
    let input = collection.doc_input(doc, vocab, model.config.max_doc_terms);
    let scores = model.term_scores(&input, &terms)?;
    Ok(terms.iter().zip(scores).map(|(t, s)| (t.id, s as f32)).collect())
}

/// A document and its `(term, impact)` entries.
type DocImpacts = (usize, Vec<(u32, f32)>);

/// Encodes every document once and stores `s_{t,d}` for each distinct
/// in-vocabulary term it contains. Documents are split into `threads`
/// contiguous shards; the merge is by term then document, so the result does
/// not depend on the thread count.
pub fn precompute_impacts(
    ck: &Checkpoint,
    collection: &Collection,
    vocab: &Vocabulary,
    threads: usize,
) -> Result<ImpactIndex> {
    check_vocab(ck, vocab)?;
    let n = collection.len();
    let threads = threads.clamp(1, n.max(1));
    let shard = n.div_ceil(threads);
    let shards: Vec<Result<Vec<DocImpacts>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|i| {
                let range = (i * shard).min(n)..((i + 1) * shard).min(n);
                s.spawn(move || {
                    range
                        .map(|d| Ok((d, doc_impacts(&ck.model, collection, vocab, d)?)))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("index shard panicked"))
            .collect()
    });
    let mut postings: BTreeMap<u32, Vec<Posting>> = BTreeMap::new();
    for shard in shards {
        for (doc, impacts) in shard? {
            for (term, impact) in impacts {
                postings.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    impact,
                });
            }
        }
    }
    Ok(ImpactIndex::from_postings(
        n as u64,
        vocab.hash(),
        ck.model_hash(),
        postings,
    ))
}

/// Full ranking of every document sharing at least one in-vocabulary term
/// with the query, best first, ties by ascending document.
pub fn exhaustive_score<S: AsRef<str>>(
    model: &CkModel,
    collection: &Collection,
    vocab: &Vocabulary,
    query: &[S],
) -> Result<Vec<(u32, f64)>> {
    Ok(
        exhaustive_score_many(model, collection, vocab, std::slice::from_ref(&query))?
            .pop()
            .unwrap_or_default(),
    )
}

/// [`exhaustive_score`] for several queries, encoding each document once.
pub fn exhaustive_score_many<Q: AsRef<[S]>, S: AsRef<str>>(
    model: &CkModel,
    collection: &Collection,
    vocab: &Vocabulary,
    queries: &[Q],
) -> Result<Vec<Vec<(u32, f64)>>> {
    let mut rankings = vec![Vec::new(); queries.len()];
    for doc in 0..collection.len() {
        let mut items = Vec::new();
        let mut owners = Vec::new();
        for (qi, q) in queries.iter().enumerate() {
            let terms = collection.matched_term_inputs(q.as_ref(), vocab, doc);
            if !terms.is_empty() {
                items.push(ScoreItem { doc: 0, terms });
                owners.push(qi);
            }
        }
        if items.is_empty() {
            continue;
        }
        let input = collection.doc_input(doc, vocab, model.config.max_doc_terms);
        let scores = model.score_batch(std::slice::from_ref(&input), &items)?;
        for (qi, s) in owners.into_iter().zip(scores) {
            rankings[qi].push((doc as u32, s));
        }
    }
    for r in &mut rankings {
        r.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    }
    Ok(rankings)
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// An index with the vocabulary and document ids needed to answer text
/// queries. On disk: the index file plus `<path>.vocab` and `<path>.docids`.
#[derive(Debug, Clone)]
pub struct SearchIndex {
    pub index: ImpactIndex,
    pub vocab: Vocabulary,
    pub docids: Vec<String>,
    pub max_query_terms: usize,
}

impl SearchIndex {
    pub fn new(index: ImpactIndex, vocab: Vocabulary, docids: Vec<String>, max_query_terms: usize) -> Result<Self> {
        if index.vocab_hash != vocab.hash() {
            return Err(Error::HashMismatch {
                what: "vocabulary sidecar does not match the index",
                expected: index.vocab_hash,
                found: vocab.hash(),
            });
        }
        if docids.len() as u64 != index.num_docs {
            return Err(Error::Format(format!(
                "index covers {} documents, docid list has {}",
                index.num_docs,
                docids.len()
            )));
        }
        Ok(Self {
            index,
            vocab,
            docids,
            max_query_terms,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.vocab.save(&sidecar(path, "vocab"))?;
        let ids = sidecar(path, "docids");
        let mut text = self.docids.join("\n");
        text.push('\n');
        std::fs::write(&ids, text).map_err(|e| Error::io(&ids, e))?;
        self.index.save(path)
    }

    /// Loads the index and its sidecars; with `checkpoint_hash` set, an index
    /// from another checkpoint is refused.
    pub fn load(path: &Path, checkpoint_hash: Option<u64>, max_query_terms: usize) -> Result<Self> {
        let index = ImpactIndex::load(path)?;
        if let Some(h) = checkpoint_hash {
            index.check_checkpoint(h)?;
        }
        let vocab = Vocabulary::load(&sidecar(path, "vocab"))?;
        let ids = sidecar(path, "docids");
        let docids = std::fs::read_to_string(&ids)
            .map_err(|e| Error::io(&ids, e))?
            .lines()
            .map(str::to_string)
            .collect();
        Self::new(index, vocab, docids, max_query_terms)
    }

    /// Query term ids after tokenization and truncation.
    pub fn encode_query(&self, text: &str) -> Vec<u32> {
        let mut terms = text::tokenize(text);
        terms.truncate(self.max_query_terms);
        terms.iter().map(|t| self.vocab.id(t)).collect()
    }

    pub fn search(&self, text: &str, k: usize) -> Vec<(String, f64)> {
        self.index
            .retrieve_topk(&self.encode_query(text), k)
            .into_iter()
            .map(|(d, s)| (self.docids[d as usize].clone(), s))
            .collect()
    }

    /// Runs every `(qid, text)` query; a query without in-vocabulary terms
    /// gets an empty list.
    pub fn search_all(&self, queries: &[(String, String)], k: usize) -> Run {
        queries.iter().map(|(q, t)| (q.clone(), self.search(t, k))).collect()
    }
}

#[cfg(test)]
#[path = "index_tests.rs"]
mod tests;
