//! Named-tensor checkpoints: a JSON manifest plus one little-endian f64 blob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{read_file, write_file};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState, Variant};
use crate::params::ParamStore;
use crate::tensor::Mat;

pub const BLOB_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "checkpoint.manifest.json";
pub const FORMAT: &str = "promptrec-checkpoint/1";
pub const DTYPE: &str = "f64-le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// `init`, `pretrain`, `tune` or `id-baseline`.
    pub stage: String,
    pub seed: u64,
    pub variant: Option<Variant>,
    pub vocab_digest: String,
    pub config_digest: String,
    pub model: Option<ModelConfig>,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
}

/// Everything in a manifest except the tensor table.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub stage: String,
    pub seed: u64,
    pub variant: Option<Variant>,
    pub vocab_digest: String,
    pub config_digest: String,
    pub model: Option<ModelConfig>,
}

pub fn encode(meta: CheckpointMeta, params: &ParamStore) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(params.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for e in params.entries() {
        let offset = blob.len();
        for x in &e.value.data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(TensorRecord {
            name: e.name.clone(),
            shape: [e.value.rows, e.value.cols],
            dtype: DTYPE.into(),
            offset,
            length: blob.len() - offset,
            frozen: e.frozen,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        stage: meta.stage,
        seed: meta.seed,
        variant: meta.variant,
        vocab_digest: meta.vocab_digest,
        config_digest: meta.config_digest,
        model: meta.model,
        tensors,
    };
    (manifest, blob)
}

pub fn decode(manifest: Manifest, blob: &[u8], origin: &Path) -> Result<Checkpoint> {
    let bad = |message: String| Error::Parse {
        path: origin.to_path_buf(),
        line: 0,
        message,
    };
    if manifest.format != FORMAT {
        return Err(bad(format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    let mut cursor = 0usize;
    let mut params = ParamStore::new();
    for t in &manifest.tensors {
        if t.dtype != DTYPE {
            return Err(bad(format!("tensor {}: unsupported dtype {}", t.name, t.dtype)));
        }
        if t.offset != cursor || t.length != t.shape[0] * t.shape[1] * 8 {
            return Err(bad(format!("tensor {}: offsets do not tile the blob", t.name)));
        }
        let bytes = blob
            .get(t.offset..t.offset + t.length)
            .ok_or_else(|| bad(format!("tensor {}: blob too short", t.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let idx = params
            .insert(t.name.clone(), Mat::from_vec(t.shape[0], t.shape[1], data))
            .map_err(|e| bad(e.to_string()))?;
        params.entry_mut(idx).frozen = t.frozen;
        cursor += t.length;
    }
    if cursor != blob.len() {
        return Err(bad(format!("blob has {} trailing bytes", blob.len() - cursor)));
    }
    Ok(Checkpoint { manifest, params })
}

pub fn save_checkpoint(dir: &Path, meta: CheckpointMeta, params: &ParamStore) -> Result<Manifest> {
    let (manifest, blob) = encode(meta, params);
    write_file(&dir.join(BLOB_FILE), &blob)?;
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    write_file(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path: PathBuf = dir.join(MANIFEST_FILE);
    let raw = read_file(&manifest_path)?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let blob = read_file(&dir.join(BLOB_FILE))?;
    decode(manifest, &blob, &manifest_path)
}

impl Checkpoint {
    pub fn into_model(self) -> Result<ModelState> {
        let config = self
            .manifest
            .model
            .ok_or_else(|| Error::Data(format!("{} checkpoint has no model configuration", self.manifest.stage)))?;
        Ok(ModelState {
            config,
            params: self.params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            stage: "pretrain".into(),
            seed: 3,
            variant: Some(Variant::Full),
            vocab_digest: "v".into(),
            config_digest: "c".into(),
            model: None,
        }
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Mat::from_vec(2, 2, vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300])).unwrap();
        s.insert("b", Mat::from_vec(1, 3, vec![0.1, 0.2, 0.3])).unwrap();
        s.apply_freeze(|n| n == "b");
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        let m = save_checkpoint(dir.path(), meta(), &s).unwrap();
        assert_eq!(m.tensors[1].offset, 32);
        assert_eq!(m.tensors[1].length, 24);
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.manifest, m);
        for (x, y) in s.entries().iter().zip(back.params.entries()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.frozen, y.frozen);
            let xb: Vec<u64> = x.value.data.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.value.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn offsets_must_tile() {
        let (mut m, blob) = encode(meta(), &store());
        m.tensors[1].offset += 8;
        assert!(decode(m, &blob, Path::new("x")).is_err());
        let (m, mut blob) = encode(meta(), &store());
        blob.push(0);
        assert!(decode(m, &blob, Path::new("x")).is_err());
    }

    #[test]
    fn bytes_are_reproducible() {
        let (m1, b1) = encode(meta(), &store());
        let (m2, b2) = encode(meta(), &store());
        assert_eq!(b1, b2);
        assert_eq!(serde_json::to_string(&m1).unwrap(), serde_json::to_string(&m2).unwrap());
    }
}
