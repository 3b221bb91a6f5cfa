use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{write_history_csv, Phase, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::models::{DecoderSpec, EncoderSpec, PerceptualSpec};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::weights;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

/// Architectures needed to rebuild the models a checkpoint's blobs belong to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpecs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<DecoderSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<PerceptualSpec>,
}

/// In-memory checkpoint. Blobs: `weights`, `best_weights`, `adam_m`, `adam_v`
/// and `frozen.<name>` for every frozen model of the phase.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub phase: Phase,
    pub config: TrainConfig,
    pub state: TrainState,
    pub specs: ModelSpecs,
    pub adam_step: u64,
    pub blobs: BTreeMap<String, BTreeMap<String, Tensor<T>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub file: String,
    pub sha256: String,
}

/// `manifest.json` of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub phase: Phase,
    pub dtype: DType,
    pub config: TrainConfig,
    pub state: TrainState,
    pub specs: ModelSpecs,
    pub adam_step: u64,
    pub blobs: BTreeMap<String, BlobRef>,
    /// sha256 over every other field (canonical JSON) and the blob hashes.
    pub content_hash: String,
}

impl CheckpointManifest {
    fn compute_hash(&self) -> String {
        let mut body = self.clone();
        body.content_hash.clear();
        hex::encode(Sha256::digest(serde_json::to_vec(&body).expect("manifest serializes")))
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corruption {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn blob(&self, name: &str) -> Result<&BTreeMap<String, Tensor<T>>> {
        self.blobs
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks the {name} blob")))
    }

    /// The weights to use downstream: the best-validation snapshot.
    pub fn best_weights(&self) -> Result<&BTreeMap<String, Tensor<T>>> {
        self.blob("best_weights")
    }

    fn manifest(&self, blob_bytes: &BTreeMap<String, Vec<u8>>) -> CheckpointManifest {
        let blobs = blob_bytes
            .iter()
            .map(|(name, bytes)| {
                (
                    name.clone(),
                    BlobRef {
                        file: format!("{name}.safetensors"),
                        sha256: hex::encode(Sha256::digest(bytes)),
                    },
                )
            })
            .collect();
        let mut m = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            phase: self.phase,
            dtype: T::DTYPE,
            config: self.config.clone(),
            state: self.state.clone(),
            specs: self.specs.clone(),
            adam_step: self.adam_step,
            blobs,
            content_hash: String::new(),
        };
        m.content_hash = m.compute_hash();
        m
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(self.manifest(&self.encode_blobs()?).content_hash)
    }

    fn encode_blobs(&self) -> Result<BTreeMap<String, Vec<u8>>> {
        self.blobs
            .iter()
            .map(|(k, v)| Ok((k.clone(), weights::encode_tensors(v)?)))
            .collect()
    }

    /// Writes the checkpoint directory atomically: everything goes to a
    /// sibling temporary directory which then replaces `dir`.
    pub fn save(&self, dir: &Path) -> Result<String> {
        let parent = dir
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let stem = dir
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::config(format!("bad checkpoint path {}", dir.display())))?;
        let tmp = parent.join(format!(".{stem}.tmp-{}", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

        let bytes = self.encode_blobs()?;
        let manifest = self.manifest(&bytes);
        for (name, data) in &bytes {
            let p = tmp.join(&manifest.blobs[name].file);
            std::fs::write(&p, data).map_err(|e| Error::io(&p, e))?;
        }
        let mp = tmp.join(MANIFEST);
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&mp, json).map_err(|e| Error::io(&mp, e))?;
        write_history_csv(&tmp.join("history.csv"), &self.state.history)?;

        if dir.exists() {
            let old: PathBuf = parent.join(format!(".{stem}.old-{}", std::process::id()));
            std::fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
            std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
            std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        } else {
            std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(manifest.content_hash)
    }

    /// Reads and verifies a checkpoint directory. Never modifies it.
    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join(MANIFEST);
        let raw = std::fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
        let value: serde_json::Value =
            serde_json::from_slice(&raw).map_err(|e| corrupt(&mp, format!("unreadable manifest: {e}")))?;
        let version = value.get("format_version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
            return Err(Error::Format(format!(
                "checkpoint format_version {version:?} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
            )));
        }
        let manifest: CheckpointManifest =
            serde_json::from_value(value).map_err(|e| corrupt(&mp, format!("invalid manifest: {e}")))?;
        if manifest.compute_hash() != manifest.content_hash {
            return Err(corrupt(&mp, "manifest content hash mismatch"));
        }
        let mut blobs = BTreeMap::new();
        for (name, r) in &manifest.blobs {
            let p = dir.join(&r.file);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if hex::encode(Sha256::digest(&bytes)) != r.sha256 {
                return Err(corrupt(&p, "blob hash does not match manifest"));
            }
            let tensors = weights::decode_tensors::<T>(&bytes).map_err(|e| corrupt(&p, e.to_string()))?;
            blobs.insert(name.clone(), tensors);
        }
        Ok(Self {
            phase: manifest.phase,
            config: manifest.config,
            state: manifest.state,
            specs: manifest.specs,
            adam_step: manifest.adam_step,
            blobs,
        })
    }
}
