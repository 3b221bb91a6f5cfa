//! Two-phase encoder distillation for promptable segmentation.
//!
//! Phase one trains a compact residual student encoder to reproduce a large
//! teacher's image embeddings under a combined feature-MSE and perceptual
//! objective. Phase two freezes that student and fine-tunes a prompt-guided
//! mask decoder with soft Dice loss. Around the two phases sit dataset
//! ingestion, an embedding cache, checkpointing, Dice evaluation and
//! reporting.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod loss;
pub mod models;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type FeatureMap32 = loss::FeatureMap<f32>;
pub type FeatureMap64 = loss::FeatureMap<f64>;
pub type Mask32 = loss::SegmentationMask<f32>;
pub type Mask64 = loss::SegmentationMask<f64>;
pub type Encoder32 = models::Encoder<f32>;
pub type Encoder64 = models::Encoder<f64>;
pub type Decoder32 = models::Decoder<f32>;
pub type Decoder64 = models::Decoder<f64>;
