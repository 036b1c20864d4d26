//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `KFATTCK1` |
//! | 4     | format version (`u32`, currently 1) |
//! | 8     | manifest length `L` (`u64`) |
//! | L     | manifest, UTF-8 JSON ([`Manifest`]) |
//! | 8·N   | parameter values as `f64`, tensors in manifest order, row-major |
//! | 32    | SHA-256 of every preceding byte |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Vocab};
use crate::numerics::{Rng, Tensor};

pub const MAGIC: &[u8; 8] = b"KFATTCK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub datagen_digest: String,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(model: &Model, config_digest: &str, datagen_digest: &str) -> Vec<u8> {
    let p = model.params();
    let manifest = Manifest {
        config_digest: config_digest.to_string(),
        datagen_digest: datagen_digest.to_string(),
        model: model.config.clone(),
        vocab: model.vocab,
        tensors: p
            .names()
            .iter()
            .zip(p.values())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * p.count_scalars() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in p.values() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, Model)> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(bad("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let json = body.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
    let mut rest = &body[20 + len..];
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        if rest.len() < 8 * n {
            return Err(bad("truncated tensor data"));
        }
        let data = rest[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        rest = &rest[8 * n..];
        named.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let mut model = Model::new(manifest.model.clone(), manifest.vocab, &mut Rng::new(0))?;
    model.load_params(named)?;
    Ok((manifest, model))
}

pub fn save(path: &Path, model: &Model, config_digest: &str, datagen_digest: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(model, config_digest, datagen_digest))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Manifest, Model)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(ModelConfig::default(), Vocab { queries: 5, items: 6 }, &mut Rng::new(4)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = encode(&m, "cfg", "data");
        let (man, back) = decode(&bytes).unwrap();
        assert_eq!(man.config_digest, "cfg");
        assert_eq!(man.datagen_digest, "data");
        assert_eq!(back.params().values(), m.params().values());
        assert_eq!(back.params().names(), m.params().names());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&model(), "cfg", "data");
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        assert!(decode(b"not a checkpoint").is_err());
    }
}
