//! `CKQTI1` checkpoints: config, vocabulary hash, parameters, normalization
//! statistics, optimizer state and step counter, little-endian.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{CkModel, NormStats};
use crate::optim::AdamState;
use crate::scorer::{RunningNorm, RunningScale};
use crate::tensor::Tensor;
use crate::text::digest64;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"CKQTI1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CkModel,
    pub vocab_hash: u64,
    pub step: u64,
    pub optimizer: Option<AdamState>,
}

fn put_norm(w: &mut Writer, n: &RunningNorm) {
    w.u8(n.mean.is_some() as u8);
    w.f64(n.mean.unwrap_or(0.0));
    w.f64(n.var);
}

fn put_scale(w: &mut Writer, s: &RunningScale) {
    w.u8(s.mean.is_some() as u8);
    w.f64(s.mean.unwrap_or(0.0));
}

fn flag(r: &mut Reader) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::Format(format!("checkpoint: bad flag byte {v}"))),
    }
}

fn get_norm(r: &mut Reader) -> Result<RunningNorm> {
    let set = flag(r)?;
    let mean = r.f64()?;
    let var = r.f64()?;
    Ok(RunningNorm {
        mean: set.then_some(mean),
        var,
    })
}

fn get_scale(r: &mut Reader) -> Result<RunningScale> {
    let set = flag(r)?;
    let mean = r.f64()?;
    Ok(RunningScale {
        mean: set.then_some(mean),
    })
}

/// Everything that determines scores: config, vocabulary, parameters and
/// statistics.
fn model_section(model: &CkModel, vocab_hash: u64) -> Vec<u8> {
    let mut w = Writer::new();
    w.blob(model.config.to_text().as_bytes());
    w.u64(model.vocab_size() as u64);
    w.u64(vocab_hash);
    w.u32(model.params.len() as u32);
    for (name, t) in model.params.iter() {
        w.blob(name.as_bytes());
        w.u32(t.shape().len() as u32);
        for d in t.shape() {
            w.u64(*d as u64);
        }
        for v in t.data() {
            w.f64(*v);
        }
    }
    let s = &model.stats;
    put_norm(&mut w, &s.latent);
    put_norm(&mut w, &s.explicit);
    put_scale(&mut w, &s.tf);
    put_scale(&mut w, &s.length);
    w.buf
}

impl Checkpoint {
    pub fn new(model: CkModel, vocab_hash: u64) -> Self {
        Self {
            model,
            vocab_hash,
            step: 0,
            optimizer: None,
        }
    }

    /// Digest of the score-determining part; optimizer state and step are
    /// excluded.
    pub fn model_hash(&self) -> u64 {
        digest64(&model_section(&self.model, self.vocab_hash))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.bytes(&model_section(&self.model, self.vocab_hash));
        w.u64(self.step);
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                w.u64(opt.step);
                for buf in opt.m.iter().chain(&opt.v) {
                    for v in buf {
                        w.f64(*v);
                    }
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let config_text =
            std::str::from_utf8(r.blob()?).map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let config = Config::parse(config_text)?;
        let vocab_size = r.u64()? as usize;
        let vocab_hash = r.u64()?;
        let mut model = CkModel::new(&config, vocab_size)?;
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} parameters, model expects {}",
                model.params.len()
            )));
        }
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if numel.saturating_mul(8) > bytes.len() {
                return Err(Error::Format(format!("checkpoint truncated in `{name}`")));
            }
            let values = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
            model
                .params
                .set(id, Tensor::new(&shape, values)?)
                .map_err(|_| Error::Format(format!("parameter `{name}` has the wrong shape")))?;
        }
        model.stats = NormStats {
            latent: get_norm(&mut r)?,
            explicit: get_norm(&mut r)?,
            tf: get_scale(&mut r)?,
            length: get_scale(&mut r)?,
        };
        let step = r.u64()?;
        let optimizer = if flag(&mut r)? {
            let opt_step = r.u64()?;
            let mut read_bufs = || -> Result<Vec<Vec<f64>>> {
                model
                    .params
                    .iter()
                    .map(|(_, t)| (0..t.numel()).map(|_| r.f64()).collect())
                    .collect()
            };
            let m = read_bufs()?;
            let v = read_bufs()?;
            Some(AdamState { step: opt_step, m, v })
        } else {
            None
        };
        r.finish()?;
        Ok(Self {
            model,
            vocab_hash,
            step,
            optimizer,
        })
    }

    /// Writes via a temporary file and rename, so an existing checkpoint is
    /// never left half-written.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DocInput, ScoreItem, TermInput};
    use crate::scorer::Mode;
    use crate::tape::Tape;
    use crate::text::TokenSequence;

    fn toy() -> Checkpoint {
        let cfg = Config {
            embedding_dim: 8,
            heads: 2,
            conv_window: 3,
            conv_groups: 2,
            layers: 1,
            ff_dim: 8,
            kernels: 4,
            ..Config::default()
        };
        let mut model = CkModel::new(&cfg, 10).unwrap();
        let docs = vec![DocInput {
            tokens: TokenSequence::new(vec![2, 3, 4, 5], 100),
            length: 4.0,
        }];
        let items = vec![ScoreItem {
            doc: 0,
            terms: vec![
                TermInput {
                    id: 2,
                    idf: 1.0,
                    tf: 1.0,
                },
                TermInput {
                    id: 7,
                    idf: 2.0,
                    tf: 0.0,
                },
            ],
        }];
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &docs, &items, Mode::Train).unwrap();
        model.observe(&out.observation.unwrap());
        let mut ck = Checkpoint::new(model, 0xfeed);
        ck.step = 17;
        let mut opt = AdamState::new(&ck.model.params);
        opt.step = 3;
        opt.m[0][1] = 0.25;
        ck.optimizer = Some(opt);
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = toy();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..6], b"CKQTI1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model_hash(), ck.model_hash());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
    }

    #[test]
    fn round_trip_preserves_scores() {
        let ck = toy();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let doc = DocInput {
            tokens: TokenSequence::new(vec![5, 4, 9], 100),
            length: 3.0,
        };
        let t = [TermInput {
            id: 4,
            idf: 1.3,
            tf: 1.0,
        }];
        assert_eq!(
            ck.model.query_document_score(&doc, &t).unwrap(),
            back.model.query_document_score(&doc, &t).unwrap()
        );
    }

    #[test]
    fn optimizer_state_is_outside_the_model_hash() {
        let ck = toy();
        let mut other = ck.clone();
        other.optimizer = None;
        other.step = 0;
        assert_eq!(ck.model_hash(), other.model_hash());
        other.model.stats.tf.mean = Some(9.0);
        assert_ne!(ck.model_hash(), other.model_hash());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = toy().to_bytes();
        assert!(Checkpoint::from_bytes(b"NOTCKP").is_err());
        for cut in [3, 10, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))),
                "{cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
