use rayon::prelude::*;

use super::{preprocess, read_embedding, DatasetManifest, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::loss::SegmentationMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A preprocessed sample: `1×3×H×W` image, `1×1×H×W` binary mask and, when
/// cached, the teacher embedding `1×E×h×w`.
#[derive(Debug, Clone)]
pub struct Example<T: Scalar> {
    pub id: String,
    pub image: Tensor<T>,
    pub mask: SegmentationMask<T>,
    pub embedding: Option<Tensor<T>>,
}

/// Random-access view over one split.
pub trait ExampleSource<T: Scalar>: Sync {
    fn len(&self) -> usize;
    fn id(&self, index: usize) -> &str;
    fn get(&self, index: usize) -> Result<Example<T>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Examples held in memory.
#[derive(Debug, Clone, Default)]
pub struct InMemorySplit<T: Scalar> {
    pub examples: Vec<Example<T>>,
}

impl<T: Scalar> InMemorySplit<T> {
    pub fn new(examples: Vec<Example<T>>) -> Self {
        Self { examples }
    }
}

impl<T: Scalar> ExampleSource<T> for InMemorySplit<T> {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.examples[index].id
    }

    fn get(&self, index: usize) -> Result<Example<T>> {
        Ok(self.examples[index].clone())
    }
}

/// Reads and preprocesses records on demand.
#[derive(Debug, Clone)]
pub struct ManifestSplit<'a> {
    manifest: &'a DatasetManifest,
    records: Vec<&'a SampleRecord>,
}

impl<'a> ManifestSplit<'a> {
    pub fn new(manifest: &'a DatasetManifest, split: Split) -> Self {
        Self {
            manifest,
            records: manifest.split(split).collect(),
        }
    }

    /// Loads every record into memory (in parallel, order preserved).
    pub fn materialize<T: Scalar>(&self) -> Result<InMemorySplit<T>> {
        let examples = (0..self.records.len())
            .into_par_iter()
            .map(|i| ExampleSource::<T>::get(self, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(InMemorySplit::new(examples))
    }
}

impl<T: Scalar> ExampleSource<T> for ManifestSplit<'_> {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.records[index].id
    }

    fn get(&self, index: usize) -> Result<Example<T>> {
        let r = self.records[index];
        let (image, mask) = preprocess::<T>(r, &self.manifest.preprocessing)?;
        let embedding = r
            .cached_embedding_path
            .as_deref()
            .map(read_embedding::<T>)
            .transpose()?;
        Ok(Example {
            id: r.id.clone(),
            image,
            mask,
            embedding,
        })
    }
}

/// Stacked mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub ids: Vec<String>,
    pub images: Tensor<T>,
    pub masks: Tensor<T>,
    pub embeddings: Option<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn load_batch<T: Scalar, S: ExampleSource<T> + ?Sized>(source: &S, indices: &[usize]) -> Result<Batch<T>> {
    if indices.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let examples = indices.par_iter().map(|&i| source.get(i)).collect::<Result<Vec<_>>>()?;
    let images = Tensor::stack_batch(&examples.iter().map(|e| e.image.clone()).collect::<Vec<_>>())?;
    let masks = Tensor::stack_batch(&examples.iter().map(|e| e.mask.values().clone()).collect::<Vec<_>>())?;
    let embeddings = if examples.iter().all(|e| e.embedding.is_some()) {
        let embs: Vec<Tensor<T>> = examples.iter().map(|e| e.embedding.clone().unwrap()).collect();
        Some(Tensor::stack_batch(&embs)?)
    } else {
        None
    };
    Ok(Batch {
        ids: examples.into_iter().map(|e| e.id).collect(),
        images,
        masks,
        embeddings,
    })
}
