//! Frozen VGG-style feature extractor used by the perceptual term.
//!
//! Layers are indexed like a flat `features` sequence (conv, relu, pool, ...);
//! `layer_ids` pick which outputs are tapped.

use serde::{Deserialize, Serialize};

use super::{HasParams, WeightsSource};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss::FeatureMap;
use crate::nn::{Conv2d, Ctx, Init, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VggArch {
    Vgg16,
    /// conv8 · conv8 · pool · conv16
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputAdapter {
    /// Fixed seeded 1×1 projection from the input channels to 3.
    #[default]
    FixedProjectionTo3ch,
    /// Repeats a single channel three times.
    ReplicateGray,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptualSpec {
    pub arch: VggArch,
    pub layer_ids: Vec<usize>,
    #[serde(default)]
    pub input_adapter: InputAdapter,
    #[serde(default)]
    pub weights: WeightsSource,
}

impl PerceptualSpec {
    /// Taps after relu1_2, relu2_2 and relu3_3.
    pub fn vgg16() -> Self {
        Self {
            arch: VggArch::Vgg16,
            layer_ids: vec![3, 8, 15],
            input_adapter: InputAdapter::FixedProjectionTo3ch,
            weights: WeightsSource::ExternalFile("weights/vgg16_features.safetensors".into()),
        }
    }

    pub fn toy() -> Self {
        Self {
            arch: VggArch::Toy,
            layer_ids: vec![1, 3, 6],
            input_adapter: InputAdapter::FixedProjectionTo3ch,
            weights: WeightsSource::RandomSeeded,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_ids.is_empty() {
            return Err(Error::config("perceptual layer_ids must be nonempty"));
        }
        if self.layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("perceptual layer_ids must be strictly increasing"));
        }
        let n = layer_sequence(self.arch).len();
        if let Some(bad) = self.layer_ids.iter().find(|&&id| id >= n) {
            return Err(Error::config(format!(
                "unknown perceptual layer_id {bad}: {:?} has {n} layers",
                self.arch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv(Conv2d),
    Relu,
    Pool,
}

fn channel_plan(arch: VggArch) -> Vec<Option<usize>> {
    let m = None;
    match arch {
        VggArch::Vgg16 => vec![
            Some(64),
            Some(64),
            m,
            Some(128),
            Some(128),
            m,
            Some(256),
            Some(256),
            Some(256),
            m,
            Some(512),
            Some(512),
            Some(512),
            m,
            Some(512),
            Some(512),
            Some(512),
            m,
        ],
        VggArch::Toy => vec![Some(8), Some(8), m, Some(16)],
    }
}

fn layer_sequence(arch: VggArch) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut c_in = 3;
    for item in channel_plan(arch) {
        match item {
            Some(c) => {
                let idx = layers.len();
                layers.push(Layer::Conv(Conv2d::new(format!("features.{idx}"), c_in, c, 3)));
                layers.push(Layer::Relu);
                c_in = c;
            }
            None => layers.push(Layer::Pool),
        }
    }
    layers
}

#[derive(Debug, Clone)]
pub struct PerceptualExtractor<T: Scalar> {
    spec: PerceptualSpec,
    layers: Vec<Layer>,
    in_channels: usize,
    store: ParamStore<T>,
}

impl<T: Scalar> PerceptualExtractor<T> {
    /// `in_channels` is the channel count of the maps that will be compared
    /// (the embedding width). The extractor is frozen on construction.
    pub fn build(spec: &PerceptualSpec, in_channels: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let init = Init::new(seed);
        let layers = layer_sequence(spec.arch);
        let mut store = ParamStore::new();
        for l in &layers {
            if let Layer::Conv(c) = l {
                c.register(&mut store, init);
            }
        }
        if let Some(path) = spec.weights.path() {
            weights::load_store_file(&mut store, path)?;
        }
        match spec.input_adapter {
            InputAdapter::FixedProjectionTo3ch if in_channels != 3 => {
                let w = init.uniform(
                    "adapter.weight",
                    &[3, in_channels, 1, 1],
                    (1.0 / in_channels as f64).sqrt(),
                );
                store.insert("adapter.weight", w, ParamKind::Weight);
            }
            InputAdapter::ReplicateGray if in_channels != 1 && in_channels != 3 => {
                return Err(Error::config(format!(
                    "replicate_gray adapter needs 1 or 3 input channels, got {in_channels}"
                )));
            }
            _ => {}
        }
        store.freeze();
        Ok(Self {
            spec: spec.clone(),
            layers,
            in_channels,
            store,
        })
    }

    pub fn spec(&self) -> &PerceptualSpec {
        &self.spec
    }

    pub fn layer_ids(&self) -> &[usize] {
        &self.spec.layer_ids
    }

    fn adapt(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let c = tape.value(x).shape()[1];
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "perceptual extractor built for {} channels, got {c}",
                self.in_channels
            )));
        }
        if c == 3 {
            return Ok(x);
        }
        match self.spec.input_adapter {
            InputAdapter::FixedProjectionTo3ch => {
                let w = self.store.bind(tape, "adapter.weight", false)?;
                tape.conv2d(x, w, None, 1, 0)
            }
            InputAdapter::ReplicateGray => tape.concat_channels(&[x, x, x]),
        }
    }

    /// Tapped activations in `layer_ids` order. Gradients flow through to
    /// `x` but never into the extractor's own weights.
    pub fn features_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let ctx = Ctx {
            training: false,
            track: false,
        };
        let mut h = self.adapt(tape, x)?;
        let mut taps = Vec::with_capacity(self.spec.layer_ids.len());
        let last = *self.spec.layer_ids.last().expect("validated nonempty");
        let mut want = self.spec.layer_ids.iter().peekable();
        for (idx, layer) in self.layers.iter().enumerate().take(last + 1) {
            h = match layer {
                Layer::Conv(c) => c.forward(tape, &self.store, h, ctx)?,
                Layer::Relu => tape.relu(h),
                Layer::Pool => tape.max_pool2d(h, 2, 2, 0)?,
            };
            if want.peek() == Some(&&idx) {
                taps.push(h);
                want.next();
            }
        }
        Ok(taps)
    }

    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<FeatureMap<T>>> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let taps = self.features_tape(&mut tape, v)?;
        taps.into_iter()
            .zip(&self.spec.layer_ids)
            .map(|(t, id)| Ok(FeatureMap::new(tape.value(t).clone())?.with_layer(format!("features.{id}"))))
            .collect()
    }
}

impl<T: Scalar> HasParams<T> for PerceptualExtractor<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
}
