use std::path::Path;

use serde::{Deserialize, Serialize};

use super::resnet::{BackboneSpec, ResnetEncoder};
use super::{HasParams, WeightsSource};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss::FeatureMap;
use crate::nn::{Conv2d, Ctx, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    /// Large vision-transformer teacher. Not executed in-process: its
    /// embeddings enter through the embedding cache.
    TeacherVit,
    StudentResnet,
    ToyConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub family: EncoderFamily,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Expected `(height, width)` of preprocessed input images.
    pub input_size: [usize; 2],
    pub embed_channels: usize,
    /// `(height, width)` of the output embedding.
    pub embed_spatial: [usize; 2],
    /// Hidden widths of the toy convolutional encoder.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hidden: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneSpec>,
    #[serde(default)]
    pub weights: WeightsSource,
}

fn default_in_channels() -> usize {
    3
}

impl EncoderSpec {
    /// ViT-H style teacher producing 256×64×64 embeddings from 1024² images.
    pub fn paper_teacher() -> Self {
        Self {
            family: EncoderFamily::TeacherVit,
            in_channels: 3,
            input_size: [1024, 1024],
            embed_channels: 256,
            embed_spatial: [64, 64],
            hidden: Vec::new(),
            backbone: None,
            weights: WeightsSource::ExternalFile("weights/teacher_vit_h.safetensors".into()),
        }
    }

    /// ResNet-50 backbone, 2048→256 projection, ×2 upsampling and refinement.
    pub fn paper_student() -> Self {
        Self {
            family: EncoderFamily::StudentResnet,
            in_channels: 3,
            input_size: [1024, 1024],
            embed_channels: 256,
            embed_spatial: [64, 64],
            hidden: Vec::new(),
            backbone: Some(BackboneSpec::resnet50()),
            weights: WeightsSource::RandomSeeded,
        }
    }

    /// Three-layer convolutional encoder: two stride-2 3×3 layers and a 1×1 head.
    pub fn toy_teacher(input: usize, embed_channels: usize) -> Self {
        Self {
            family: EncoderFamily::ToyConv,
            in_channels: 3,
            input_size: [input, input],
            embed_channels,
            embed_spatial: [input / 4, input / 4],
            hidden: vec![16, 32],
            backbone: None,
            weights: WeightsSource::RandomSeeded,
        }
    }

    /// Small residual encoder that downsamples ×8 and upsamples back to ×4.
    pub fn toy_student(input: usize, embed_channels: usize) -> Self {
        Self {
            family: EncoderFamily::StudentResnet,
            in_channels: 3,
            input_size: [input, input],
            embed_channels,
            embed_spatial: [input / 4, input / 4],
            hidden: Vec::new(),
            backbone: Some(BackboneSpec::toy()),
            weights: WeightsSource::RandomSeeded,
        }
    }

    /// Channel count of the residual backbone before projection.
    pub fn backbone_out_channels(&self) -> Option<usize> {
        self.backbone.as_ref().map(BackboneSpec::out_channels)
    }

    pub fn output_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.embed_channels, self.embed_spatial[0], self.embed_spatial[1]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_channels == 0 || self.embed_spatial.contains(&0) || self.input_size.contains(&0) {
            return Err(Error::config("encoder dimensions must be >= 1"));
        }
        match self.family {
            EncoderFamily::ToyConv => {
                if self.hidden.len() != 2 {
                    return Err(Error::config("toy_conv encoder needs exactly two hidden widths"));
                }
                let expect = [self.input_size[0].div_ceil(4), self.input_size[1].div_ceil(4)];
                if expect != self.embed_spatial {
                    return Err(Error::config(format!(
                        "toy_conv encoder maps {:?} to {:?}, spec says {:?}",
                        self.input_size, expect, self.embed_spatial
                    )));
                }
            }
            EncoderFamily::StudentResnet => {
                let b = self
                    .backbone
                    .as_ref()
                    .ok_or_else(|| Error::config("student_resnet encoder needs a backbone section"))?;
                b.validate()?;
            }
            EncoderFamily::TeacherVit => {}
        }
        Ok(())
    }
}

/// `conv3x3/2 → relu → conv3x3/2 → relu → conv1x1`.
#[derive(Debug, Clone)]
pub struct ToyConvEncoder<T: Scalar> {
    layers: [Conv2d; 3],
    store: ParamStore<T>,
}

impl<T: Scalar> ToyConvEncoder<T> {
    pub fn new(spec: &EncoderSpec, init: Init) -> Self {
        let (h0, h1) = (spec.hidden[0], spec.hidden[1]);
        let layers = [
            Conv2d::new("conv1", spec.in_channels, h0, 3).stride(2),
            Conv2d::new("conv2", h0, h1, 3).stride(2),
            Conv2d::new("head", h1, spec.embed_channels, 1),
        ];
        let mut store = ParamStore::new();
        for l in &layers {
            l.register(&mut store, init);
        }
        Self { layers, store }
    }

    pub fn layers(&self) -> &[Conv2d; 3] {
        &self.layers
    }

    fn forward_tape(&self, tape: &mut Tape<T>, x: Var, ctx: Ctx) -> Result<Var> {
        let h = self.layers[0].forward(tape, &self.store, x, ctx)?;
        let h = tape.relu(h);
        let h = self.layers[1].forward(tape, &self.store, h, ctx)?;
        let h = tape.relu(h);
        self.layers[2].forward(tape, &self.store, h, ctx)
    }
}

#[derive(Debug, Clone)]
enum Body<T: Scalar> {
    Toy(ToyConvEncoder<T>),
    Resnet(ResnetEncoder<T>),
    External(ParamStore<T>),
}

/// Image encoder: teacher or student.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    spec: EncoderSpec,
    body: Body<T>,
}

impl<T: Scalar> Encoder<T> {
    /// Instantiates the architecture and fills weights per `spec.weights`.
    /// An external weight file that is missing is an error, never a silent
    /// fallback to random weights.
    pub fn build(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let init = Init::new(seed);
        let body = match spec.family {
            EncoderFamily::ToyConv => Body::Toy(ToyConvEncoder::new(spec, init)),
            EncoderFamily::StudentResnet => Body::Resnet(ResnetEncoder::new(spec, init)?),
            EncoderFamily::TeacherVit => {
                let path = spec
                    .weights
                    .path()
                    .ok_or_else(|| Error::Weights("teacher_vit requires external weights".into()))?;
                if !path.is_file() {
                    return Err(Error::Weights(format!("teacher weights {} not found", path.display())));
                }
                Body::External(ParamStore::new())
            }
        };
        let mut enc = Self {
            spec: spec.clone(),
            body,
        };
        if let (Some(path), false) = (spec.weights.path(), matches!(enc.body, Body::External(_))) {
            enc.load_weights(path)?;
        }
        Ok(enc)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        weights::load_store_file(self.params_mut(), path)
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn as_resnet(&self) -> Option<&ResnetEncoder<T>> {
        match &self.body {
            Body::Resnet(r) => Some(r),
            _ => None,
        }
    }

    pub fn as_toy(&self) -> Option<&ToyConvEncoder<T>> {
        match &self.body {
            Body::Toy(t) => Some(t),
            _ => None,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::shape(format!("images must be rank 4, got {shape:?}")));
        };
        if *c != self.spec.in_channels || [*h, *w] != self.spec.input_size {
            return Err(Error::shape(format!(
                "encoder expects (*, {}, {}, {}), got {:?}",
                self.spec.in_channels, self.spec.input_size[0], self.spec.input_size[1], shape
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`; output is `(B, embed_channels, H_e, W_e)`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, x: Var, ctx: Ctx) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let out = match &self.body {
            Body::Toy(m) => m.forward_tape(tape, x, ctx)?,
            Body::Resnet(m) => m.forward_tape(tape, x, ctx)?,
            Body::External(_) => return Err(Error::Weights(
                "teacher_vit forward is not available in-process; supply its embeddings through the embedding cache"
                    .into(),
            )),
        };
        let shape = tape.value(out).shape();
        if shape[1..] != self.spec.output_shape(1)[1..] {
            return Err(Error::shape(format!(
                "encoder produced {:?}, spec declares {:?}",
                shape,
                self.spec.output_shape(shape[0])
            )));
        }
        Ok(out)
    }

    /// Evaluation-mode forward of a preprocessed image batch.
    pub fn forward(&self, images: &Tensor<T>) -> Result<FeatureMap<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let y = self.forward_tape(&mut tape, x, Ctx::EVAL)?;
        FeatureMap::new(tape.take_value(y))
    }
}

impl<T: Scalar> HasParams<T> for Encoder<T> {
    fn params(&self) -> &ParamStore<T> {
        match &self.body {
            Body::Toy(m) => &m.store,
            Body::Resnet(m) => m.params(),
            Body::External(s) => s,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        match &mut self.body {
            Body::Toy(m) => &mut m.store,
            Body::Resnet(m) => m.params_mut(),
            Body::External(s) => s,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_teacher_shape_and_determinism() {
        let spec = EncoderSpec::toy_teacher(32, 8);
        let enc = Encoder::<f64>::build(&spec, 3).unwrap();
        let x = Init::new(1).uniform::<f64>("x", &[2, 3, 32, 32], 1.0);
        let a = enc.forward(&x).unwrap();
        let b = enc.forward(&x).unwrap();
        assert_eq!(a.shape(), &[2, 8, 8, 8]);
        assert_eq!(a.values().to_le_bytes(), b.values().to_le_bytes());
    }

    #[test]
    fn wrong_resolution_is_shape_error() {
        let enc = Encoder::<f32>::build(&EncoderSpec::toy_teacher(32, 8), 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        assert!(matches!(enc.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn missing_external_weights_is_weights_error() {
        let mut spec = EncoderSpec::toy_teacher(32, 8);
        spec.weights = WeightsSource::ExternalFile("/nonexistent/t.safetensors".into());
        assert!(matches!(Encoder::<f32>::build(&spec, 0), Err(Error::Weights(_))));
        let vit = EncoderSpec::paper_teacher();
        assert!(matches!(Encoder::<f32>::build(&vit, 0), Err(Error::Weights(_))));
    }

    #[test]
    fn toy_spec_validation() {
        let mut spec = EncoderSpec::toy_teacher(32, 8);
        spec.embed_spatial = [4, 4];
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }
}
