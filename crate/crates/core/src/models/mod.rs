//! Teacher and student encoders, the perceptual feature extractor and the
//! prompt-conditioned mask decoder, each available at full scale (external
//! weights) and toy scale (small, seeded).

mod decoder;
mod encoder;
mod perceptual;
mod prompt;
mod resnet;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use decoder::{Decoder, DecoderSpec};
pub use encoder::{Encoder, EncoderFamily, EncoderSpec, ToyConvEncoder};
pub use perceptual::{InputAdapter, PerceptualExtractor, PerceptualSpec, VggArch};
pub use prompt::{derive_prompt, Prompt, PromptPolicy, PromptSet, PromptType};
pub use resnet::{BackboneSpec, ResnetEncoder, StageSpec};

use crate::autograd::Resample;
use crate::nn::ParamStore;
use crate::scalar::Scalar;

/// Where a model's weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    /// Seeded random initialization; the seed comes from the run configuration.
    #[default]
    RandomSeeded,
    /// A safetensors file with matching parameter names.
    ExternalFile(PathBuf),
}

impl WeightsSource {
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            WeightsSource::RandomSeeded => None,
            WeightsSource::ExternalFile(p) => Some(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    Nearest,
    #[default]
    Bilinear,
}

impl From<ResampleMode> for Resample {
    fn from(m: ResampleMode) -> Self {
        match m {
            ResampleMode::Nearest => Resample::Nearest,
            ResampleMode::Bilinear => Resample::Bilinear,
        }
    }
}

/// Anything that owns a parameter store.
pub trait HasParams<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
}

/// Number of learnable scalar weights (running statistics excluded). The
/// count does not depend on whether the model is currently frozen.
pub fn count_parameters<T: Scalar, M: HasParams<T> + ?Sized>(model: &M) -> u64 {
    model.params().weight_count()
}
