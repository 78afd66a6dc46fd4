//! `DTMC` checkpoints: architecture, optional environment binding, a tensor
//! manifest, free-form provenance and a content hash, followed by the raw
//! little-endian f32 payload in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use dtmerge_tensor::{ParameterTree, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchConfig;
use crate::dt::{DtModel, EnvBinding};
use crate::io::{frame, read_file, unframe, write_atomic};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DTMC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// SHA-256 over every entry's name, shape and little-endian values, in tree order.
pub fn tree_hash(tree: &ParameterTree) -> String {
    let mut h = Sha256::new();
    for (name, t) in tree.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    binding: Option<EnvBinding>,
    tensors: Vec<ManifestEntry>,
    provenance: BTreeMap<String, String>,
    content_hash: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub binding: Option<EnvBinding>,
    pub params: ParameterTree,
    pub provenance: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(arch: ArchConfig, binding: Option<EnvBinding>, params: ParameterTree) -> Self {
        Checkpoint {
            arch,
            binding,
            params,
            provenance: BTreeMap::new(),
        }
    }

    pub fn from_model(model: &DtModel) -> Self {
        Self::new(model.arch.clone(), Some(model.binding.clone()), model.params.clone())
    }

    pub fn with_provenance(mut self, key: &str, value: impl Into<String>) -> Self {
        self.provenance.insert(key.to_string(), value.into());
        self
    }

    pub fn into_model(self) -> Result<DtModel> {
        let binding = self
            .binding
            .ok_or_else(|| Error::Config("checkpoint has no environment binding".into()))?;
        Ok(DtModel {
            arch: self.arch,
            binding,
            params: self.params,
        })
    }

    pub fn content_hash(&self) -> String {
        tree_hash(&self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.to_string(),
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel();
                e
            })
            .collect();
        let header = Header {
            arch: self.arch.clone(),
            binding: self.binding.clone(),
            tensors,
            provenance: self.provenance.clone(),
            content_hash: self.content_hash(),
        };
        let mut payload = Vec::with_capacity(self.params.num_params());
        for (_, t) in self.params.iter() {
            payload.extend_from_slice(t.data());
        }
        Ok(frame(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &serde_json::to_vec(&header)?, &payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = unframe(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let header: Header =
            serde_json::from_slice(header).map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
        let mut params = ParameterTree::new();
        let mut expected = 0usize;
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected {
                return Err(Error::Corrupt(format!(
                    "{}: offset {} breaks manifest order (expected {expected})",
                    e.name, e.offset
                )));
            }
            let numel: usize = e.shape.iter().product();
            let start = e.offset / 4;
            let data = payload
                .get(start..start + numel)
                .ok_or_else(|| Error::Corrupt(format!("{}: payload truncated", e.name)))?;
            expected += 4 * numel;
            params
                .insert(e.name.clone(), Tensor::new(e.shape, data.to_vec())?)
                .map_err(|_| Error::Corrupt(format!("{}: duplicate entry", e.name)))?;
        }
        if expected != payload.len() * 4 {
            return Err(Error::Corrupt(format!(
                "payload has {} bytes, manifest covers {expected}",
                payload.len() * 4
            )));
        }
        let ckpt = Checkpoint {
            arch: header.arch,
            binding: header.binding,
            params,
            provenance: header.provenance,
        };
        let actual = ckpt.content_hash();
        if actual != header.content_hash {
            return Err(Error::Corrupt(format!(
                "content hash mismatch: header {}, payload {actual}",
                header.content_hash
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::transformer::init_transformer;

    #[test]
    fn byte_identical_round_trip() {
        let arch = ArchConfig::tiny(8);
        let tree = init_transformer(&arch, &mut substream(5, "t")).unwrap();
        let ckpt = Checkpoint::new(arch, None, tree).with_provenance("run", "unit");
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(back.params.bit_eq(&ckpt.params));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn tampering_is_detected() {
        let arch = ArchConfig::tiny(8);
        let tree = init_transformer(&arch, &mut substream(5, "t")).unwrap();
        let mut bytes = Checkpoint::new(arch, None, tree).to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..n - 4]), Err(Error::Corrupt(_))));
    }
}
