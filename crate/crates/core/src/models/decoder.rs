//! Prompt-conditioned mask decoder.
//!
//! The embedding is concatenated with rasterized prompt maps, mixed by two
//! 3×3 convolutions, then upsampled ×4 by two stride-2 transposed
//! convolutions to a single logit channel followed by a sigmoid.

use serde::{Deserialize, Serialize};

use super::prompt::{rasterize, PromptSet, PromptType};
use super::{HasParams, WeightsSource};
use crate::autograd::{Resample, Tape, Var};
use crate::error::{Error, Result};
use crate::loss::{FeatureMap, SegmentationMask};
use crate::nn::{Conv2d, ConvTranspose2d, Ctx, Init, ParamStore};
use crate::scalar::Scalar;
use crate::weights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub prompt_types: Vec<PromptType>,
    pub embed_channels: usize,
    pub embed_spatial: [usize; 2],
    pub hidden: usize,
    /// Mask resolution, equal to the preprocessed image size.
    pub output_size: [usize; 2],
    #[serde(default)]
    pub weights: WeightsSource,
}

impl DecoderSpec {
    pub fn paper() -> Self {
        Self {
            prompt_types: vec![PromptType::Point, PromptType::Box],
            embed_channels: 256,
            embed_spatial: [64, 64],
            hidden: 256,
            output_size: [1024, 1024],
            weights: WeightsSource::RandomSeeded,
        }
    }

    pub fn toy(input: usize, embed_channels: usize) -> Self {
        Self {
            prompt_types: vec![PromptType::Point, PromptType::Box],
            embed_channels,
            embed_spatial: [input / 4, input / 4],
            hidden: 32,
            output_size: [input, input],
            weights: WeightsSource::RandomSeeded,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_types.is_empty() {
            return Err(Error::config("decoder needs at least one prompt type"));
        }
        if self.hidden < 2 || self.embed_channels == 0 {
            return Err(Error::config("decoder widths must be positive (hidden >= 2)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<T: Scalar> {
    spec: DecoderSpec,
    types: Vec<PromptType>,
    mix1: Conv2d,
    mix2: Conv2d,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
    store: ParamStore<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn build(spec: &DecoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut types = spec.prompt_types.clone();
        types.sort();
        types.dedup();
        let init = Init::new(seed);
        let c_in = spec.embed_channels + types.len();
        let h = spec.hidden;
        let mix1 = Conv2d::new("mix1", c_in, h, 3);
        let mix2 = Conv2d::new("mix2", h, h, 3);
        let up1 = ConvTranspose2d::new("up1", h, h / 2, 2, 2);
        let up2 = ConvTranspose2d::new("up2", h / 2, 1, 2, 2);
        let mut store = ParamStore::new();
        mix1.register(&mut store, init);
        mix2.register(&mut store, init);
        up1.register(&mut store, init);
        up2.register(&mut store, init);
        if let Some(path) = spec.weights.path() {
            weights::load_store_file(&mut store, path)?;
        }
        Ok(Self {
            spec: spec.clone(),
            types,
            mix1,
            mix2,
            up1,
            up2,
            store,
        })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    /// Prompt channel order fed to the first convolution.
    pub fn prompt_channels(&self) -> &[PromptType] {
        &self.types
    }

    /// Returns the pre-sigmoid logits and the probability mask.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        embedding: Var,
        prompts: &[PromptSet],
        ctx: Ctx,
    ) -> Result<(Var, Var)> {
        let (b, c, h, w) = tape.value(embedding).dims4()?;
        if c != self.spec.embed_channels {
            return Err(Error::shape(format!(
                "decoder expects {} embedding channels, got {c}",
                self.spec.embed_channels
            )));
        }
        if prompts.len() != b {
            return Err(Error::Prompt(format!(
                "{} prompt sets for a batch of {b}",
                prompts.len()
            )));
        }
        let maps = rasterize::<T>(prompts, &self.types, self.spec.output_size, [h, w])?;
        let maps = tape.constant(maps);
        let x = tape.concat_channels(&[embedding, maps])?;
        let x = self.mix1.forward(tape, &self.store, x, ctx)?;
        let x = tape.relu(x);
        let x = self.mix2.forward(tape, &self.store, x, ctx)?;
        let x = tape.relu(x);
        let x = self.up1.forward(tape, &self.store, x, ctx)?;
        let x = tape.relu(x);
        let x = self.up2.forward(tape, &self.store, x, ctx)?;
        let [oh, ow] = self.spec.output_size;
        let logits = tape.resize(x, oh, ow, Resample::Bilinear)?;
        let probs = tape.sigmoid(logits);
        Ok((logits, probs))
    }

    pub fn forward(&self, embedding: &FeatureMap<T>, prompts: &[PromptSet]) -> Result<SegmentationMask<T>> {
        let mut tape = Tape::new();
        let e = tape.constant(embedding.values().clone());
        let (_, p) = self.forward_tape(&mut tape, e, prompts, Ctx::EVAL)?;
        SegmentationMask::probability(tape.take_value(p))
    }
}

impl<T: Scalar> HasParams<T> for Decoder<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
}
