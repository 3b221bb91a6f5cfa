//! Bottleneck residual backbone followed by a channel-projection and
//! upsampling neck that maps backbone features onto the teacher's embedding
//! grid.

use serde::{Deserialize, Serialize};

use super::encoder::EncoderSpec;
use super::{HasParams, ResampleMode};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Init, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    pub width: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    pub stages: Vec<StageSpec>,
    pub expansion: usize,
    /// Batch normalization after every convolution (biases are dropped when on).
    pub norm: bool,
    /// 3×3 convolutions applied after upsampling to the embedding grid.
    pub refine_convs: usize,
    #[serde(default)]
    pub upsample: ResampleMode,
}

impl BackboneSpec {
    /// ResNet-50: stages of 3/4/6/3 bottlenecks, 2048 output channels.
    pub fn resnet50() -> Self {
        Self {
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            stages: vec![
                StageSpec {
                    blocks: 3,
                    width: 64,
                    stride: 1,
                },
                StageSpec {
                    blocks: 4,
                    width: 128,
                    stride: 2,
                },
                StageSpec {
                    blocks: 6,
                    width: 256,
                    stride: 2,
                },
                StageSpec {
                    blocks: 3,
                    width: 512,
                    stride: 2,
                },
            ],
            expansion: 4,
            norm: true,
            refine_convs: 4,
            upsample: ResampleMode::Bilinear,
        }
    }

    pub fn toy() -> Self {
        Self {
            stem_channels: 16,
            stem_kernel: 3,
            stem_stride: 2,
            stem_pool: false,
            stages: vec![
                StageSpec {
                    blocks: 1,
                    width: 8,
                    stride: 2,
                },
                StageSpec {
                    blocks: 1,
                    width: 16,
                    stride: 2,
                },
            ],
            expansion: 4,
            norm: false,
            refine_convs: 2,
            upsample: ResampleMode::Bilinear,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stages
            .last()
            .map_or(self.stem_channels, |s| s.width * self.expansion)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty()
            || self
                .stages
                .iter()
                .any(|s| s.blocks == 0 || s.width == 0 || s.stride == 0)
        {
            return Err(Error::config("backbone stages must be nonempty with positive sizes"));
        }
        if self.expansion == 0 || self.stem_channels == 0 || self.stem_kernel == 0 || self.stem_stride == 0 {
            return Err(Error::config("backbone stem and expansion must be positive"));
        }
        if self.refine_convs == 0 {
            return Err(Error::config("backbone needs at least one refinement convolution"));
        }
        Ok(())
    }
}

/// Convolution optionally followed by batch norm.
#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

impl ConvUnit {
    fn new(conv: Conv2d, bn_name: String, norm: bool) -> Self {
        if norm {
            let c = conv.c_out;
            Self {
                conv: conv.no_bias(),
                bn: Some(BatchNorm2d::new(bn_name, c)),
            }
        } else {
            Self { conv, bn: None }
        }
    }

    fn register<T: Scalar>(&self, store: &mut ParamStore<T>, init: Init) {
        self.conv.register(store, init);
        if let Some(bn) = &self.bn {
            bn.register(store);
        }
    }

    fn param_count(&self) -> u64 {
        self.conv.param_count() + self.bn.as_ref().map_or(0, BatchNorm2d::param_count)
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ctx: Ctx) -> Result<Var> {
        let y = self.conv.forward(tape, store, x, ctx)?;
        match &self.bn {
            Some(bn) => bn.forward(tape, store, y, ctx),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: ConvUnit,
    spatial: ConvUnit,
    expand: ConvUnit,
    downsample: Option<ConvUnit>,
}

impl Bottleneck {
    fn new(prefix: &str, c_in: usize, width: usize, expansion: usize, stride: usize, norm: bool) -> Self {
        let c_out = width * expansion;
        let unit = |conv: Conv2d, bn: &str| ConvUnit::new(conv, format!("{prefix}.{bn}"), norm);
        let downsample = (stride != 1 || c_in != c_out).then(|| {
            ConvUnit::new(
                Conv2d::new(format!("{prefix}.downsample.0"), c_in, c_out, 1).stride(stride),
                format!("{prefix}.downsample.1"),
                norm,
            )
        });
        Self {
            reduce: unit(Conv2d::new(format!("{prefix}.conv1"), c_in, width, 1), "bn1"),
            spatial: unit(
                Conv2d::new(format!("{prefix}.conv2"), width, width, 3).stride(stride),
                "bn2",
            ),
            expand: unit(Conv2d::new(format!("{prefix}.conv3"), width, c_out, 1), "bn3"),
            downsample,
        }
    }

    fn units(&self) -> impl Iterator<Item = &ConvUnit> {
        [&self.reduce, &self.spatial, &self.expand]
            .into_iter()
            .chain(self.downsample.as_ref())
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ctx: Ctx) -> Result<Var> {
        let h = self.reduce.forward(tape, store, x, ctx)?;
        let h = tape.relu(h);
        let h = self.spatial.forward(tape, store, h, ctx)?;
        let h = tape.relu(h);
        let h = self.expand.forward(tape, store, h, ctx)?;
        let skip = match &self.downsample {
            Some(d) => d.forward(tape, store, x, ctx)?,
            None => x,
        };
        let y = tape.add(h, skip)?;
        Ok(tape.relu(y))
    }
}

/// Residual student encoder.
#[derive(Debug, Clone)]
pub struct ResnetEncoder<T: Scalar> {
    stem: ConvUnit,
    stem_pool: bool,
    blocks: Vec<Bottleneck>,
    proj: ConvUnit,
    refine: Vec<ConvUnit>,
    upsample: ResampleMode,
    embed_spatial: [usize; 2],
    store: ParamStore<T>,
}

impl<T: Scalar> ResnetEncoder<T> {
    pub fn new(spec: &EncoderSpec, init: Init) -> Result<Self> {
        let b = spec
            .backbone
            .as_ref()
            .ok_or_else(|| Error::config("student_resnet encoder needs a backbone section"))?;
        let norm = b.norm;
        let stem = ConvUnit::new(
            Conv2d::new("conv1", spec.in_channels, b.stem_channels, b.stem_kernel)
                .stride(b.stem_stride)
                .pad(b.stem_kernel / 2),
            "bn1".into(),
            norm,
        );
        let mut blocks = Vec::new();
        let mut c_in = b.stem_channels;
        for (si, stage) in b.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let stride = if bi == 0 { stage.stride } else { 1 };
                let prefix = format!("layer{}.{}", si + 1, bi);
                blocks.push(Bottleneck::new(&prefix, c_in, stage.width, b.expansion, stride, norm));
                c_in = stage.width * b.expansion;
            }
        }
        let e = spec.embed_channels;
        let proj = ConvUnit::new(Conv2d::new("neck.proj", c_in, e, 1), "neck.proj_bn".into(), norm);
        let refine = (0..b.refine_convs)
            .map(|i| {
                ConvUnit::new(
                    Conv2d::new(format!("neck.refine.{i}.conv"), e, e, 3),
                    format!("neck.refine.{i}.bn"),
                    norm,
                )
            })
            .collect();
        let mut enc = Self {
            stem,
            stem_pool: b.stem_pool,
            blocks,
            proj,
            refine,
            upsample: b.upsample,
            embed_spatial: spec.embed_spatial,
            store: ParamStore::new(),
        };
        let mut store = ParamStore::new();
        for u in enc.units() {
            u.register(&mut store, init);
        }
        enc.store = store;
        Ok(enc)
    }

    fn units(&self) -> impl Iterator<Item = &ConvUnit> {
        std::iter::once(&self.stem)
            .chain(self.blocks.iter().flat_map(|b| b.units()))
            .chain(std::iter::once(&self.proj))
            .chain(self.refine.iter())
    }

    /// Learnable weights, summed layer by layer from the declared shapes.
    pub fn declared_param_count(&self) -> u64 {
        self.units().map(ConvUnit::param_count).sum()
    }

    pub fn neck_param_count(&self) -> u64 {
        self.proj.param_count() + self.refine.iter().map(ConvUnit::param_count).sum::<u64>()
    }

    /// Backbone only, before projection.
    pub fn backbone_forward(&self, tape: &mut Tape<T>, x: Var, ctx: Ctx) -> Result<Var> {
        let mut h = self.stem.forward(tape, &self.store, x, ctx)?;
        h = tape.relu(h);
        if self.stem_pool {
            h = tape.max_pool2d(h, 3, 2, 1)?;
        }
        for b in &self.blocks {
            h = b.forward(tape, &self.store, h, ctx)?;
        }
        Ok(h)
    }

    pub fn forward_tape(&self, tape: &mut Tape<T>, x: Var, ctx: Ctx) -> Result<Var> {
        let h = self.backbone_forward(tape, x, ctx)?;
        let h = self.proj.forward(tape, &self.store, h, ctx)?;
        let mut h = tape.relu(h);
        h = tape.resize(h, self.embed_spatial[0], self.embed_spatial[1], self.upsample.into())?;
        let last = self.refine.len() - 1;
        for (i, unit) in self.refine.iter().enumerate() {
            h = unit.forward(tape, &self.store, h, ctx)?;
            if i != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

impl<T: Scalar> HasParams<T> for ResnetEncoder<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
}
