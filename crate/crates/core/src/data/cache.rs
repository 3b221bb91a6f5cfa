use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{preprocess, DatasetManifest};
use crate::error::{Error, Result};
use crate::models::{Encoder, HasParams};
use crate::scalar::{decode_le, DType, Scalar};
use crate::tensor::Tensor;

/// Leading bytes of every `.emb` file.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"KDSGEMB1";
const INDEX_FILE: &str = "index.json";

/// Content-hash index stored next to the embedding files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    /// Identifies the teacher (architecture + weights) that produced the entries.
    pub teacher_hash: String,
    pub dtype: Option<DType>,
    pub entries: BTreeMap<String, CacheEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub file: String,
    /// sha256 of the tensor's raw little-endian element bytes.
    pub sha256: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub computed: usize,
    pub skipped: usize,
}

impl CacheIndex {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(INDEX_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map(Some).map_err(|e| Error::Corruption {
            path,
            reason: e.to_string(),
        })
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(INDEX_FILE);
        let tmp = dir.join(format!("{INDEX_FILE}.tmp"));
        let bytes = serde_json::to_vec_pretty(self).expect("index serializes");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes a tensor as `magic | dtype u8 | rank u8 | dims u64 LE… | data LE`.
pub fn encode_embedding<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.shape().len() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.push(match T::DTYPE {
        DType::F32 => 0,
        DType::F64 => 1,
    });
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    out
}

/// Inverse of [`encode_embedding`]; also returns the stored dtype and the
/// sha256 of the raw element bytes.
pub fn decode_embedding<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(Tensor<T>, DType, String)> {
    let corrupt = |reason: &str| Error::Corruption {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 10 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(corrupt("not an embedding file"));
    }
    let dtype = match bytes[8] {
        0 => DType::F32,
        1 => DType::F64,
        _ => return Err(corrupt("unknown dtype tag")),
    };
    let rank = bytes[9] as usize;
    let header = 10 + 8 * rank;
    if bytes.len() < header {
        return Err(corrupt("truncated header"));
    }
    let shape: Vec<usize> = bytes[10..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != numel * dtype.size() {
        return Err(corrupt("payload length does not match shape"));
    }
    let data = decode_le::<T>(payload, dtype);
    Ok((Tensor::from_vec(&shape, data)?, dtype, sha256_hex(payload)))
}

pub fn read_embedding<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_embedding(&bytes, path)?.0)
}

fn file_name(id: &str) -> String {
    format!("{}.emb", id.replace(['/', '\\'], "__"))
}

fn teacher_hash<T: Scalar>(teacher: &Encoder<T>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(teacher.spec()).expect("spec serializes"));
    h.update(teacher.params().content_hash().as_bytes());
    hex::encode(h.finalize())
}

/// Whether the entry's file exists and still hashes to the recorded value.
fn entry_valid(dir: &Path, entry: &CacheEntry) -> bool {
    let path = dir.join(&entry.file);
    let Ok(bytes) = std::fs::read(&path) else {
        return false;
    };
    matches!(decode_embedding::<f64>(&bytes, &path), Ok((t, _, hash)) if hash == entry.sha256 && t.shape() == entry.shape.as_slice())
}

/// Runs the teacher once per record and stores the embeddings under
/// `<cache_root>/<dataset>/`. Records whose cached file is present and
/// matches the index hash (for the same teacher) are skipped.
pub fn cache_teacher_embeddings<T: Scalar>(
    manifest: &DatasetManifest,
    teacher: &Encoder<T>,
    cache_root: &Path,
) -> Result<(DatasetManifest, CacheStats)> {
    let dir = cache_root.join(&manifest.name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let thash = teacher_hash(teacher);
    let mut index = match CacheIndex::load(&dir)? {
        Some(idx) if idx.teacher_hash == thash && idx.dtype == Some(T::DTYPE) => idx,
        _ => CacheIndex {
            teacher_hash: thash,
            dtype: Some(T::DTYPE),
            entries: BTreeMap::new(),
        },
    };

    let todo: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| !index.entries.get(&r.id).is_some_and(|e| entry_valid(&dir, e)))
        .map(|(i, _)| i)
        .collect();

    // one image per forward pass, so results do not depend on batching or threads
    let computed: Vec<(String, CacheEntry)> = todo
        .par_iter()
        .map(|&i| {
            let r = &manifest.records[i];
            let (image, _) = preprocess::<T>(r, &manifest.preprocessing)?;
            let emb = teacher.forward(&image)?.into_values();
            let file = file_name(&r.id);
            let path = dir.join(&file);
            std::fs::write(&path, encode_embedding(&emb)).map_err(|e| Error::io(&path, e))?;
            Ok((
                r.id.clone(),
                CacheEntry {
                    file,
                    sha256: sha256_hex(&emb.to_le_bytes()),
                    shape: emb.shape().to_vec(),
                },
            ))
        })
        .collect::<Result<_>>()?;

    let stats = CacheStats {
        computed: computed.len(),
        skipped: manifest.records.len() - computed.len(),
    };
    index.entries.extend(computed);
    index.save(&dir)?;
    Ok((with_paths(manifest, &dir, &index)?, stats))
}

fn with_paths(manifest: &DatasetManifest, dir: &Path, index: &CacheIndex) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    for r in &mut out.records {
        let entry = index
            .entries
            .get(&r.id)
            .ok_or_else(|| Error::Manifest(format!("embedding cache has no entry for {}", r.id)))?;
        r.cached_embedding_path = Some(dir.join(&entry.file));
    }
    Ok(out)
}

/// Points the manifest at an existing cache (for example one produced by an
/// out-of-process teacher), verifying every entry's content hash.
pub fn attach_cache(manifest: &DatasetManifest, cache_root: &Path) -> Result<DatasetManifest> {
    let dir: PathBuf = cache_root.join(&manifest.name);
    let index = CacheIndex::load(&dir)?
        .ok_or_else(|| Error::Manifest(format!("no embedding cache index in {}", dir.display())))?;
    for r in &manifest.records {
        if let Some(e) = index.entries.get(&r.id) {
            if !entry_valid(&dir, e) {
                return Err(Error::Corruption {
                    path: dir.join(&e.file),
                    reason: "content hash does not match index".into(),
                });
            }
        }
    }
    with_paths(manifest, &dir, &index)
}
