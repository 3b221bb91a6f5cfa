//! Dice evaluation, reference comparison and figure/sidecar emission.

mod figures;
mod report;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use figures::{emit_figures, quantile, BoxStats, QUANTILE_METHOD};
pub use report::{compare_report, ComparisonRow, ReferenceDice, ReferenceParams, ReferenceTable, RunReport};

use crate::data::{ExampleSource, Split};
use crate::error::{Error, Result};
use crate::loss::{dice_per_image, SegmentationMask};
use crate::models::{derive_prompt, Decoder, Encoder, PromptPolicy, PromptSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that maps an image plus prompt to a `1×1×H×W` probability mask.
pub trait Segmenter<T: Scalar>: Sync {
    fn segment(&self, image: &Tensor<T>, prompt: &PromptSet) -> Result<SegmentationMask<T>>;
}

/// Frozen encoder followed by the prompt-guided decoder.
pub struct Pipeline<'a, T: Scalar> {
    pub encoder: &'a Encoder<T>,
    pub decoder: &'a Decoder<T>,
}

impl<T: Scalar> Segmenter<T> for Pipeline<'_, T> {
    fn segment(&self, image: &Tensor<T>, prompt: &PromptSet) -> Result<SegmentationMask<T>> {
        let emb = self.encoder.forward(image)?;
        self.decoder.forward(&emb, std::slice::from_ref(prompt))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset_name: String,
    pub model: String,
    pub sample_ids: Vec<String>,
    pub per_sample_dice: Vec<f64>,
    pub mean_dice: f64,
    /// Population standard deviation (divides by n).
    pub std_dice: f64,
    pub n_samples: usize,
    pub prompt_policy: PromptPolicy,
    pub threshold: f64,
    /// Content hash of the evaluated checkpoint or weights.
    pub model_identity: String,
}

/// `(mean, population std)`; summation in index order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalResult {
    pub fn from_scores(
        dataset_name: impl Into<String>,
        model: impl Into<String>,
        scores: Vec<(String, f64)>,
        prompt_policy: PromptPolicy,
        threshold: f64,
        model_identity: impl Into<String>,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Eval("no samples to aggregate".into()));
        }
        let (sample_ids, per_sample_dice): (Vec<_>, Vec<_>) = scores.into_iter().unzip();
        let (mean_dice, std_dice) = mean_std(&per_sample_dice);
        Ok(Self {
            dataset_name: dataset_name.into(),
            model: model.into(),
            n_samples: per_sample_dice.len(),
            sample_ids,
            per_sample_dice,
            mean_dice,
            std_dice,
            prompt_policy,
            threshold,
            model_identity: model_identity.into(),
        })
    }
}

/// Per-sample hard Dice over a test split. Samples with an empty ground truth
/// get no prompt and are scored against an empty prediction.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Scalar, S: ExampleSource<T> + ?Sized, M: Segmenter<T> + ?Sized>(
    dataset_name: &str,
    model_name: &str,
    test: &S,
    model: &M,
    policy: PromptPolicy,
    threshold: f64,
    model_identity: &str,
) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::Eval(format!(
            "{} split of {dataset_name} is empty",
            Split::Test.as_str()
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!("threshold {threshold} outside [0, 1]")));
    }
    let scores = (0..test.len())
        .into_par_iter()
        .map(|i| {
            let ex = test.get(i)?;
            let (_, _, h, w) = ex.mask.values().dims4()?;
            let pred = match derive_prompt(ex.mask.values().data(), h, w, policy) {
                Some(prompt) => model.segment(&ex.image, &prompt)?,
                None => SegmentationMask::probability(Tensor::zeros(ex.mask.values().shape()))?,
            };
            Ok((ex.id, dice_per_image(&pred, &ex.mask, threshold)?[0]))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_scores(dataset_name, model_name, scores, policy, threshold, model_identity)
}

/// `results.csv` with one row per sample: `dataset,sample_id,dice`.
pub fn write_results_csv(path: &Path, results: &[EvalResult]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["dataset", "sample_id", "dice"]).map_err(io)?;
    for r in results {
        for (id, d) in r.sample_ids.iter().zip(&r.per_sample_dice) {
            w.write_record([r.dataset_name.as_str(), id.as_str(), &d.to_string()])
                .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
