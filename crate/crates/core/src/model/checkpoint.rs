//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` container version, `u64` header length, a JSON
//! header, then a safetensors blob holding every tensor. All integers are
//! little-endian.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::schema::AttributeVocabulary;

const MAGIC: &[u8; 8] = b"MDCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_config: ModelConfig,
    pub vocab_hash: String,
    pub step: u64,
    /// Free-form trainer state (optimizer settings, best metric, …).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(header: &CheckpointHeader, tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(header)?;
        let blob = safetensors::tensor::serialize(tensors.iter(), None)
            .map_err(|e| Error::Contract(format!("cannot serialize tensors: {e}")))?;
        let mut out = Vec::with_capacity(20 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    /// Writes through a temporary sibling so a crash never leaves a torn file.
    pub fn save(path: &Path, header: &CheckpointHeader, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let bytes = Self::to_bytes(header, tensors)?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path, device: &Device) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])
            .map_err(|e| bad(&format!("bad header: {e}")))?;
        let tensors = candle_core::safetensors::load_buffer(&body[hlen..], device)
            .map_err(|e| bad(&format!("bad tensor block: {e}")))?;
        Ok(Self { header, tensors })
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path, device)
    }

    /// Fails unless the checkpoint was trained against `vocab`.
    pub fn check_vocabulary(&self, vocab: &AttributeVocabulary) -> Result<()> {
        let want = vocab.hash();
        if self.header.vocab_hash != want {
            return Err(Error::Validation(format!(
                "checkpoint vocabulary hash {} does not match current vocabulary {}",
                self.header.vocab_hash, want
            )));
        }
        Ok(())
    }
}

impl Model {
    /// Parameter tensors keyed by name.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .vars()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn checkpoint_header(&self, step: u64, extra: serde_json::Value) -> CheckpointHeader {
        CheckpointHeader {
            model_config: self.config.clone(),
            vocab_hash: self.vocab.hash(),
            step,
            extra,
        }
    }

    /// Rebuilds a model from a checkpoint, refusing a foreign vocabulary.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        vocab: AttributeVocabulary,
        dtype: candle_core::DType,
        device: &Device,
    ) -> Result<Self> {
        ckpt.check_vocabulary(&vocab)?;
        let model = Model::new(ckpt.header.model_config.clone(), vocab, dtype, device)?;
        model.params.load(&ckpt.tensors)?;
        Ok(model)
    }
}
