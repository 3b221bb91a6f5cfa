//! Dataset ingestion: `<root>/images/<id>.<ext>` paired with
//! `<root>/masks/<id>.<ext>`, seeded train/val/test splits, preprocessing,
//! synthetic shape datasets and the teacher embedding cache.

mod cache;
mod preprocess;
mod source;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cache::{
    attach_cache, cache_teacher_embeddings, decode_embedding, encode_embedding, read_embedding, CacheIndex, CacheStats,
    EMBEDDING_MAGIC,
};
pub use preprocess::{load_image_rgb, load_mask, prepare, preprocess, resize_bilinear, resize_nearest, Preprocessing};
pub use source::{load_batch, Batch, Example, ExampleSource, InMemorySplit, ManifestSplit};
pub use synthetic::{generate_synthetic, synthesize, ShapeDesc, SyntheticSample, SyntheticSpec};

use crate::error::{Error, Result};

const IMAGE_EXTS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cached_embedding_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub preprocessing: Preprocessing,
}

/// How records are assigned to splits when no `splits.csv` is present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// `(train, val, test)`, nonnegative, summing to 1.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fractions: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = self.fractions;
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!(
                "split fractions must be nonnegative and sum to 1, got {f:?}"
            )));
        }
        Ok(())
    }

    /// Record counts `(train, val, test)` for `n` records.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.fractions[0] * n as f64).round() as usize).min(n);
        let val = ((self.fractions[1] * n as f64).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_ids(&self, split: Split) -> Vec<String> {
        self.split(split).map(|r| r.id.clone()).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Appends another manifest's records, prefixing ids with its name.
    pub fn concat(&self, other: &DatasetManifest, name: &str) -> Result<DatasetManifest> {
        if self.preprocessing != other.preprocessing {
            return Err(Error::Manifest(
                "cannot concatenate datasets with different preprocessing".into(),
            ));
        }
        let mut records = Vec::with_capacity(self.records.len() + other.records.len());
        for (m, r) in self
            .records
            .iter()
            .map(|r| (self, r))
            .chain(other.records.iter().map(|r| (other, r)))
        {
            let mut r = r.clone();
            r.id = format!("{}/{}", m.name, r.id);
            records.push(r);
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(DatasetManifest {
            name: name.to_string(),
            root: self.root.clone(),
            records,
            preprocessing: self.preprocessing.clone(),
        })
    }

    /// Checks disjoint unique ids and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(&r.id) {
                return Err(Error::Manifest(format!("duplicate id {}", r.id)));
            }
            for p in [&r.image_path, &r.mask_path] {
                if !p.is_file() {
                    return Err(Error::Manifest(format!("missing file {}", p.display())));
                }
            }
        }
        Ok(())
    }
}

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Manifest(format!("non-utf8 file name {}", path.display())))?
            .to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Manifest(format!(
                "two files share id {stem}: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

fn read_splits_csv(path: &Path) -> Result<BTreeMap<String, Split>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let (Some(id), Some(split)) = (row.get(0), row.get(1)) else {
            return Err(Error::Manifest(format!("{}: rows need id,split", path.display())));
        };
        let split = Split::parse(split)
            .ok_or_else(|| Error::Manifest(format!("{}: unknown split {split:?}", path.display())))?;
        out.insert(id.trim().to_string(), split);
    }
    Ok(out)
}

/// Scans `root` and assigns splits. A `<root>/splits.csv` (columns `id,split`)
/// takes precedence over the seeded shuffle.
pub fn load_dataset(
    root: &Path,
    name: &str,
    split: &SplitSpec,
    preprocessing: Preprocessing,
) -> Result<DatasetManifest> {
    split.validate()?;
    let images = list_by_stem(&root.join("images"))?;
    let masks = list_by_stem(&root.join("masks"))?;
    let missing: Vec<&str> = images
        .keys()
        .filter(|id| !masks.contains_key(*id))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Manifest(format!("images without masks: {}", missing.join(", "))));
    }
    if images.is_empty() {
        return Err(Error::Manifest(format!(
            "no images under {}",
            root.join("images").display()
        )));
    }
    let ids: Vec<String> = images.keys().cloned().collect();
    let splits_file = root.join("splits.csv");
    let assignment: BTreeMap<String, Split> = if splits_file.is_file() {
        let table = read_splits_csv(&splits_file)?;
        let absent: Vec<&str> = ids
            .iter()
            .filter(|id| !table.contains_key(*id))
            .map(String::as_str)
            .collect();
        if !absent.is_empty() {
            return Err(Error::Manifest(format!("splits.csv lacks ids: {}", absent.join(", "))));
        }
        ids.iter().map(|id| (id.clone(), table[id])).collect()
    } else {
        let mut order = ids.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(split.seed));
        let (n_train, n_val, _) = split.counts(order.len());
        order
            .into_iter()
            .enumerate()
            .map(|(i, id)| {
                let s = if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                (id, s)
            })
            .collect()
    };
    let records = ids
        .iter()
        .map(|id| SampleRecord {
            id: id.clone(),
            image_path: images[id].clone(),
            mask_path: masks[id].clone(),
            split: assignment[id],
            cached_embedding_path: None,
        })
        .collect();
    Ok(DatasetManifest {
        name: name.to_string(),
        root: root.to_path_buf(),
        records,
        preprocessing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts() {
        let s = SplitSpec {
            fractions: [0.8, 0.1, 0.1],
            seed: 0,
        };
        assert_eq!(s.counts(10), (8, 1, 1));
        assert_eq!(s.counts(100), (80, 10, 10));
        let all = SplitSpec {
            fractions: [1.0, 0.0, 0.0],
            seed: 0,
        };
        assert_eq!(all.counts(7), (7, 0, 0));
        let bad = SplitSpec {
            fractions: [0.5, 0.1, 0.1],
            seed: 0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn split_names() {
        assert_eq!(Split::parse(" Validation"), Some(Split::Val));
        assert_eq!(Split::parse("holdout"), None);
    }
}
