//! Binary checkpoint format.
//!
//! Layout: magic `TNTK`, u32 format version, a canonical key-sorted
//! `key=value` text block (config snapshot plus the vocabulary reference
//! hash), then the named parameter tensors sorted by name, each stored as
//! name, shape, and 32-bit little-endian values. Writes go through a
//! temp-file rename so a crash cannot leave a torn checkpoint.

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, HeadKind, ModelConfig};
use crate::rng_from_seed;
use crate::tokenizer::Tokenizer;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"TNTK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Canonical config snapshot; iteration order is the storage order.
    pub config: BTreeMap<String, String>,
    /// `(name, shape, values)` sorted by name.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

/// Hex SHA-256 of the tokenizer's canonical text artifacts; stored in the
/// checkpoint so an incompatible vocabulary is rejected at load time.
pub fn vocabulary_hash(tokenizer: &Tokenizer) -> String {
    let mut hasher = Sha256::new();
    hasher.update(tokenizer.vocab.to_text().as_bytes());
    if let Some(bpe) = &tokenizer.bpe {
        hasher.update(bpe.to_text().as_bytes());
    }
    if let Some(tags) = &tokenizer.tags {
        hasher.update(tags.to_text().as_bytes());
    }
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn config_to_kv(cfg: &ModelConfig) -> BTreeMap<String, String> {
    let mut kv = BTreeMap::new();
    let e = &cfg.encoder;
    kv.insert("embedding_dim".into(), e.embedding_dim.to_string());
    kv.insert("num_heads".into(), e.num_heads.to_string());
    kv.insert("num_layers".into(), e.num_layers.to_string());
    kv.insert("sequence_length".into(), e.sequence_length.to_string());
    kv.insert("ffn_dim".into(), e.ffn_dim.to_string());
    kv.insert("rel_pos_window".into(), e.rel_pos_window.to_string());
    kv.insert("use_pos_tags".into(), e.use_pos_tags.to_string());
    kv.insert("dropout_rate".into(), e.dropout_rate.to_string());
    kv.insert("vocab_size".into(), cfg.vocab_size.to_string());
    kv.insert("head_end".into(), cfg.head_end.to_string());
    kv.insert("mid_end".into(), cfg.mid_end.to_string());
    kv.insert("tag_vocab_size".into(), cfg.tag_vocab_size.to_string());
    kv.insert("head".into(), cfg.head.as_str().to_string());
    kv
}

fn kv_get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    kv.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Compatibility(format!("checkpoint config key `{key}` missing or invalid")))
}

fn config_from_kv(kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
    Ok(ModelConfig {
        encoder: EncoderConfig {
            embedding_dim: kv_get(kv, "embedding_dim")?,
            num_heads: kv_get(kv, "num_heads")?,
            num_layers: kv_get(kv, "num_layers")?,
            sequence_length: kv_get(kv, "sequence_length")?,
            ffn_dim: kv_get(kv, "ffn_dim")?,
            rel_pos_window: kv_get(kv, "rel_pos_window")?,
            use_pos_tags: kv_get(kv, "use_pos_tags")?,
            dropout_rate: kv_get(kv, "dropout_rate")?,
        },
        vocab_size: kv_get(kv, "vocab_size")?,
        head_end: kv_get(kv, "head_end")?,
        mid_end: kv_get(kv, "mid_end")?,
        tag_vocab_size: kv_get(kv, "tag_vocab_size")?,
        head: HeadKind::parse(&kv_get::<String>(kv, "head")?)?,
    })
}

impl Checkpoint {
    /// Snapshot a model. `extra` carries run metadata (vocab hash,
    /// tokenization scheme, pretraining objective, ...).
    pub fn from_model(model: &EncoderModel<f32>, extra: &[(&str, String)]) -> Self {
        let mut config = config_to_kv(&model.config);
        for (k, v) in extra {
            config.insert((*k).to_string(), v.clone());
        }
        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = model
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone(), p.values.clone()))
            .collect();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Checkpoint {
            version: FORMAT_VERSION,
            config,
            tensors,
        }
    }

    /// Rebuild the model; every stored tensor must exist with the same
    /// shape, and no parameter may be missing from the checkpoint.
    pub fn to_model(&self) -> Result<EncoderModel<f32>> {
        let cfg = config_from_kv(&self.config)?;
        let mut rng = rng_from_seed(0);
        let mut model = EncoderModel::new(cfg, &mut rng)?;
        if model.params.len() != self.tensors.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for (name, shape, values) in &self.tensors {
            let idx = model
                .param_index(name)
                .ok_or_else(|| Error::Compatibility(format!("unexpected tensor `{name}`")))?;
            let p = &mut model.params[idx];
            if &p.shape != shape {
                return Err(Error::Compatibility(format!(
                    "tensor `{name}`: shape {:?} vs expected {:?}",
                    shape, p.shape
                )));
            }
            p.values.clone_from(values);
        }
        Ok(model)
    }

    pub fn vocab_hash(&self) -> Option<&str> {
        self.config.get("vocab_hash").map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let block: String = self
            .config
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        out.extend_from_slice(&(block.len() as u64).to_le_bytes());
        out.extend_from_slice(block.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, values) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Compatibility("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Compatibility(format!("unsupported checkpoint version {version}")));
        }
        let block_len = r.u64()? as usize;
        let block = std::str::from_utf8(r.take(block_len)?)
            .map_err(|_| Error::Compatibility("config block is not UTF-8".into()))?;
        let mut config = BTreeMap::new();
        for line in block.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Compatibility(format!("bad config line `{line}`")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Compatibility("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, shape, values));
        }
        Ok(Checkpoint {
            version,
            config,
            tensors,
        })
    }

    /// Atomic write: temp file in the target directory, then rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
        ));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Compatibility("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::model::{EncoderModel, HeadKind, ModelConfig};
    use crate::rng_from_seed;

    fn toy_model(head: HeadKind, seed: u64) -> EncoderModel<f32> {
        let mut encoder = EncoderConfig::toy(8);
        encoder.dropout_rate = 0.0;
        let cfg = ModelConfig {
            encoder,
            vocab_size: 20,
            head_end: 10,
            mid_end: 16,
            tag_vocab_size: 0,
            head,
        };
        EncoderModel::new(cfg, &mut rng_from_seed(seed)).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let model = toy_model(HeadKind::Lm, 77);
        let ckpt = Checkpoint::from_model(&model, &[("vocab_hash", "abc123".into())]);
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        let restored = back.to_model().unwrap();
        for (a, b) in model.params.iter().zip(&restored.params) {
            assert_eq!(a.name, b.name);
            assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // serializing the restored model reproduces the bytes
        let again = Checkpoint::from_model(&restored, &[("vocab_hash", "abc123".into())]);
        assert_eq!(again.to_bytes(), bytes);
    }

    #[test]
    fn file_roundtrip_and_atomic_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = toy_model(HeadKind::Classifier, 5);
        let ckpt = Checkpoint::from_model(&model, &[]);
        ckpt.write(&path).unwrap();
        assert_eq!(Checkpoint::read(&path).unwrap(), ckpt);
        // no temp file left behind
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let model = toy_model(HeadKind::Lm, 1);
        let mut bytes = Checkpoint::from_model(&model, &[]).to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());

        let mut bytes2 = Checkpoint::from_model(&model, &[]).to_bytes();
        bytes2[4] = 99;
        assert!(Checkpoint::from_bytes(&bytes2).is_err());
    }

    #[test]
    fn config_block_is_key_sorted_text() {
        let model = toy_model(HeadKind::Lm, 1);
        let ckpt = Checkpoint::from_model(&model, &[("objective", "autoregressive".into())]);
        let bytes = ckpt.to_bytes();
        let block_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let block = std::str::from_utf8(&bytes[16..16 + block_len]).unwrap();
        let keys: Vec<&str> = block.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(block.contains("objective=autoregressive"));
    }

    #[test]
    fn tensor_shape_mismatch_is_compatibility_error() {
        let model = toy_model(HeadKind::Lm, 1);
        let mut ckpt = Checkpoint::from_model(&model, &[]);
        ckpt.tensors[0].1 = vec![1, 1];
        ckpt.tensors[0].2 = vec![0.0];
        match ckpt.to_model() {
            Err(Error::Compatibility(_)) => {}
            Err(other) => panic!("expected compatibility error, got {other:?}"),
            Ok(_) => panic!("shape mismatch was accepted"),
        }
    }
}
