//! Tokenization, vocabulary and non-contextualized term embeddings.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PAD_ID: u32 = 0;
pub const OOV_ID: u32 = 1;
const PAD_TERM: &str = "<pad>";
const OOV_TERM: &str = "<oov>";
const VOCAB_MAGIC: &str = "#ckvocab";

/// Lowercases and splits on every non-alphanumeric codepoint.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Term ids of a query or document, truncated to a maximum length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Length before truncation.
    pub original_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, max_len: usize) -> Self {
        let original_len = ids.len();
        let mut ids = ids;
        ids.truncate(max_len);
        Self { ids, original_len }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn as_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }

    /// 1.0 for real tokens, 0.0 for padding.
    pub fn mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != PAD_ID).collect()
    }
}

/// Closed vocabulary with document frequencies.
///
/// Id 0 is padding and id 1 is the shared out-of-vocabulary slot; real terms
/// start at 2 and are ordered lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    df: Vec<u64>,
    ids: HashMap<String, u32>,
    num_docs: u64,
    min_df: u64,
}

impl Vocabulary {
    /// Counts document frequencies over `docs` (each an iterator of terms) and
    /// keeps terms with `df >= min_df`.
    pub fn build<D, T, S>(docs: D, min_df: u64) -> Result<Self>
    where
        D: IntoIterator<Item = T>,
        T: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut num_docs = 0u64;
        let mut seen = HashSet::new();
        for doc in docs {
            num_docs += 1;
            seen.clear();
            for term in doc {
                let term = term.as_ref();
                if seen.insert(term.to_string()) {
                    *counts.entry(term.to_string()).or_default() += 1;
                }
            }
        }
        if num_docs == 0 {
            return Err(Error::EmptyCorpus);
        }
        let kept = counts.into_iter().filter(|(_, df)| *df >= min_df.max(1));
        Ok(Self::from_entries(kept, num_docs, min_df))
    }

    fn from_entries(entries: impl Iterator<Item = (String, u64)>, num_docs: u64, min_df: u64) -> Self {
        let mut terms = vec![PAD_TERM.to_string(), OOV_TERM.to_string()];
        let mut df = vec![0, 0];
        for (t, d) in entries {
            terms.push(t);
            df.push(d);
        }
        let ids = terms
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            terms,
            df,
            ids,
            num_docs,
            min_df,
        }
    }

    /// Number of ids, including padding and OOV.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.len() <= 2
    }

    pub fn num_docs(&self) -> u64 {
        self.num_docs
    }

    pub fn min_df(&self) -> u64 {
        self.min_df
    }

    pub fn id(&self, term: &str) -> u32 {
        self.ids.get(term).copied().unwrap_or(OOV_ID)
    }

    pub fn get(&self, term: &str) -> Option<u32> {
        self.ids.get(term).copied()
    }

    pub fn term(&self, id: u32) -> Option<&str> {
        self.terms.get(id as usize).map(String::as_str)
    }

    pub fn df(&self, id: u32) -> u64 {
        self.df.get(id as usize).copied().unwrap_or(0)
    }

    /// Real terms with their ids.
    pub fn entries(&self) -> impl Iterator<Item = (u32, &str)> {
        self.terms
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (i as u32, t.as_str()))
    }

    pub fn encode<S: AsRef<str>>(&self, terms: &[S], max_len: usize) -> TokenSequence {
        TokenSequence::new(terms.iter().map(|t| self.id(t.as_ref())).collect(), max_len)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{VOCAB_MAGIC}\t{}\t{}\n", self.num_docs, self.min_df);
        for (id, term) in self.entries() {
            out.push_str(&format!("{term}\t{}\n", self.df[id as usize]));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty vocabulary file".into()))?;
        let mut h = header.split('\t');
        if h.next() != Some(VOCAB_MAGIC) {
            return Err(Error::Format("missing vocabulary header".into()));
        }
        let parse_u64 = |s: Option<&str>, what: &str| -> Result<u64> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad {what} in vocabulary")))
        };
        let num_docs = parse_u64(h.next(), "document count")?;
        let min_df = parse_u64(h.next(), "min_df")?;
        let mut entries = Vec::new();
        let mut prev: Option<String> = None;
        for (lineno, line) in lines.enumerate() {
            let (term, df) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("vocabulary line {}: no tab", lineno + 2)))?;
            let df = parse_u64(Some(df), "df")?;
            if prev.as_deref().is_some_and(|p| p >= term) {
                return Err(Error::Format(format!(
                    "vocabulary line {}: terms not strictly sorted",
                    lineno + 2
                )));
            }
            prev = Some(term.to_string());
            entries.push((term.to_string(), df));
        }
        Ok(Self::from_entries(entries.into_iter(), num_docs, min_df))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Stable 64-bit digest of the serialized vocabulary.
    pub fn hash(&self) -> u64 {
        digest64(self.to_text().as_bytes())
    }
}

/// First 8 bytes (little-endian) of the SHA-256 of `bytes`.
pub fn digest64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Random embedding table: uniform in `±1/√dim`, padding row zero.
pub fn init_embeddings(vocab_size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (dim as f64).sqrt();
    let mut values: Vec<f64> = (0..vocab_size * dim).map(|_| rng.gen_range(-bound..bound)).collect();
    let pad_row = dim.min(values.len());
    values[..pad_row].iter_mut().for_each(|v| *v = 0.0);
    Tensor::from_parts(vec![vocab_size, dim], values)
}

/// Overwrites rows of `table` from a text file of `term v1 … vdim` lines.
/// Terms not in the vocabulary are skipped. Returns the number of rows set.
pub fn load_external_vectors(path: &Path, vocab: &Vocabulary, table: &Tensor) -> Result<(Tensor, usize)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (rows, dim) = table.dims2()?;
    let mut values = table.to_vec();
    let mut loaded = 0;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(term) = parts.next() else { continue };
        let vec: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if vec.len() != dim {
            return Err(Error::Format(format!(
                "{}:{}: expected {dim} values, found {}",
                path.display(),
                lineno + 1,
                vec.len()
            )));
        }
        if let Some(id) = vocab.get(term) {
            let id = id as usize;
            if id < rows {
                values[id * dim..(id + 1) * dim].copy_from_slice(&vec);
                loaded += 1;
            }
        }
    }
    Ok((Tensor::new(&[rows, dim], values)?, loaded))
}

/// Embedding lookup for a token sequence; padding positions are zero rows.
pub fn embed(tape: &mut Tape, table: Var, seq: &TokenSequence) -> Result<Var> {
    tape.gather(table, &seq.as_usize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn toy_vocab(min_df: u64) -> Vocabulary {
        let docs = [tokenize("a b"), tokenize("a c")];
        Vocabulary::build(docs.iter(), min_df).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Deep Learning!"), ["deep", "learning"]);
        assert_eq!(tokenize("BM25-based"), ["bm25", "based"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("  Ünïcode\u{2014}text  "), ["ünïcode", "text"]);
    }

    #[test]
    fn min_df_filters_terms() {
        let v = toy_vocab(2);
        assert_eq!(v.entries().map(|(_, t)| t).collect::<Vec<_>>(), ["a"]);
        assert_eq!(v.df(v.id("a")), 2);
        let v = toy_vocab(1);
        assert_eq!(v.entries().map(|(_, t)| t).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(v.num_docs(), 2);
    }

    #[test]
    fn unseen_terms_are_oov() {
        let v = toy_vocab(1);
        assert_eq!(v.id("zebra"), OOV_ID);
        assert_ne!(v.id("a"), PAD_ID);
        assert_eq!(v.term(PAD_ID), Some(PAD_TERM));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let docs: Vec<Vec<String>> = Vec::new();
        assert!(matches!(Vocabulary::build(docs, 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn save_load_round_trip() {
        let v = toy_vocab(1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        v.save(&p).unwrap();
        let w = Vocabulary::load(&p).unwrap();
        assert_eq!(v, w);
        assert_eq!(v.hash(), w.hash());
        assert_eq!(std::fs::read_to_string(&p).unwrap(), w.to_text());
    }

    #[test]
    fn truncation_keeps_prefix() {
        let s = TokenSequence::new((2..30).collect(), 20);
        assert_eq!(s.len(), 20);
        assert_eq!(s.original_len, 28);
        assert_eq!(s.ids[..3], [2, 3, 4]);
    }

    #[test]
    fn embed_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table = init_embeddings(5, 4, &mut rng);
        assert!(table.row(0).iter().all(|v| *v == 0.0));
        let mut t = Tape::new();
        let tv = t.constant(table.clone());
        let pads = embed(&mut t, tv, &TokenSequence::new(vec![0, 0, 0], 10)).unwrap();
        assert!(t.value(pads).data().iter().all(|v| *v == 0.0));
        let one = embed(&mut t, tv, &TokenSequence::new(vec![3], 10)).unwrap();
        assert_eq!(t.value(one).data(), table.row(3));
        assert!(embed(&mut t, tv, &TokenSequence::new(vec![5], 10)).is_err());
    }

    #[test]
    fn embedding_gradient_touches_only_looked_up_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = init_embeddings(6, 3, &mut rng);
        let seq = TokenSequence::new(vec![2, 4, 0, 2], 10);
        let r = gradcheck::check(std::slice::from_ref(&table), 1e-3, |t, v| {
            let e = embed(t, v[0], &seq)?;
            let sq = t.mul(e, e)?;
            gradcheck::weighted_sum(t, sq)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");

        let mut t = Tape::new();
        let tv = t.leaf(table, true);
        let e = embed(&mut t, tv, &seq).unwrap();
        let s = t.sum(e);
        let g = t.backward(s).unwrap().get(tv);
        for row in 0..6 {
            let touched = g.row(row).iter().any(|v| *v != 0.0);
            assert_eq!(touched, row == 2 || row == 4, "row {row}");
        }
    }

    #[test]
    fn external_vectors_hook() {
        let v = toy_vocab(1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vec.txt");
        std::fs::write(&p, "a 1 2\nzzz 5 5\nc 3 4\n").unwrap();
        let table = Tensor::zeros(&[v.len(), 2]);
        let (t, n) = load_external_vectors(&p, &v, &table).unwrap();
        assert_eq!(n, 2);
        assert_eq!(t.row(v.id("a") as usize), &[1.0, 2.0]);
        assert_eq!(t.row(v.id("c") as usize), &[3.0, 4.0]);
        std::fs::write(&p, "a 1 2 3\n").unwrap();
        assert!(load_external_vectors(&p, &v, &table).is_err());
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(s in "\\PC{0,60}") {
            let once = tokenize(&s);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn truncation_never_grows(ids in prop::collection::vec(0u32..50, 0..40), max in 0usize..30) {
            let s = TokenSequence::new(ids.clone(), max);
            prop_assert!(s.len() <= ids.len());
            prop_assert_eq!(&s.ids[..], &ids[..s.len()]);
        }
    }
}
