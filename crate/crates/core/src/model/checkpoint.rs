use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Result, SeqModel};
use crate::data::Vocab;
use crate::numerics::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"CONFNMT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    step: u64,
    tensors: Vec<TensorEntry>,
}

/// Model, vocabulary and training step.
///
/// File layout: 8-byte magic, `u32` version, `u64` header length, a JSON
/// header (config, vocabulary, step, tensor names and shapes), then every
/// tensor as little-endian `f32` in header order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SeqModel,
    pub vocab: Vocab,
    pub step: u64,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if self.vocab.len() != self.model.config().vocab_size {
            return Err(bad(format!(
                "vocabulary has {} tokens, model expects {}",
                self.vocab.len(),
                self.model.config().vocab_size
            )));
        }
        let header = Header {
            config: self.model.config().clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            tensors: self
                .model
                .params()
                .iter()
                .map(|(_, name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, _, t) in self.model.params().iter() {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(u32b);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(|_| bad("truncated header"))?;
        let len = u64::from_le_bytes(u64b) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
        header.config.validate()?;
        if header.vocab.len() != header.config.vocab_size {
            return Err(bad(format!(
                "vocabulary has {} tokens, config expects {}",
                header.vocab.len(),
                header.config.vocab_size
            )));
        }
        let mut params = ParamSet::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(|_| bad(format!("truncated data for {}", e.name)))?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            params.add(e.name.clone(), Tensor::new(e.shape.clone(), data));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let model = SeqModel::from_params(&header.config, params)?;
        Ok(Self { model, vocab: header.vocab, step: header.step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::numerics::RngState;

    fn ckpt() -> Checkpoint {
        let cfg = ModelConfig { vocab_size: 12, d_model: 8, heads: 2, ffn_dim: 8, ..ModelConfig::default() };
        Checkpoint {
            model: init_model(&cfg, &RngState::new(5)).unwrap(),
            vocab: Vocab::synthetic(12).unwrap(),
            step: 42,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = ckpt();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.vocab, c.vocab);
        assert_eq!(back.model.config(), c.model.config());
        for ((_, a, x), (_, b, y)) in c.model.params().iter().zip(back.model.params().iter()) {
            assert_eq!(a, b);
            assert_eq!(x, y);
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_corruption() {
        let c = ckpt();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let mut wrong_magic = buf.clone();
        wrong_magic[0] = b'X';
        assert!(Checkpoint::read_from(&mut wrong_magic.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 3];
        assert!(Checkpoint::read_from(&mut &truncated[..]).is_err());
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(Checkpoint::read_from(&mut trailing.as_slice()).is_err());
        let mut version = buf.clone();
        version[8] = 9;
        assert!(Checkpoint::read_from(&mut version.as_slice()).is_err());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let c = ckpt();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        // rewrite the header to claim a wider feed-forward layer
        let len = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
        let header = String::from_utf8(buf[20..20 + len].to_vec()).unwrap();
        let patched = header.replace("\"ffn_dim\":8", "\"ffn_dim\":16");
        assert_ne!(header, patched);
        let mut out = buf[..12].to_vec();
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&buf[20 + len..]);
        assert!(matches!(Checkpoint::read_from(&mut out.as_slice()), Err(ModelError::Checkpoint(_))));
    }

    #[test]
    fn vocab_size_must_match() {
        let mut c = ckpt();
        c.vocab = Vocab::synthetic(13).unwrap();
        assert!(c.write_to(&mut Vec::new()).is_err());
    }
}
