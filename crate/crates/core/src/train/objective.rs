use rayon::prelude::*;

use super::{LossMode, Phase, TrainConfig};
use crate::autograd::{Tape, Var};
use crate::data::{Example, ExampleSource, Split};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::models::{derive_prompt, Decoder, Encoder, HasParams, PerceptualExtractor, PromptPolicy, PromptSet};
use crate::nn::{Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loss graph for one batch: the scalar that is optimized plus named
/// (already weighted) components for logging.
pub struct LossParts {
    pub total: Var,
    pub parts: Vec<(&'static str, Var)>,
}

/// What a training phase optimizes. Implementations own their trainable model
/// and any frozen models it depends on.
pub trait Objective<T: Scalar>: Sync {
    fn phase(&self) -> Phase;
    fn trainable(&self) -> &ParamStore<T>;
    fn trainable_mut(&mut self) -> &mut ParamStore<T>;
    /// Frozen models whose weights must survive training bit-exactly.
    fn frozen(&self) -> Vec<(&'static str, &ParamStore<T>)>;
    fn len(&self, split: Split) -> usize;
    fn loss(&self, tape: &mut Tape<T>, split: Split, indices: &[usize], ctx: Ctx) -> Result<LossParts>;
}

/// Where phase-1 targets come from.
pub enum TeacherTargets<'a, T: Scalar> {
    /// Embeddings already attached to each example (the on-disk cache).
    Cached,
    /// Run this teacher on the fly.
    Live(&'a Encoder<T>),
}

#[derive(Debug, Clone)]
pub struct DistillExample<T: Scalar> {
    pub id: String,
    pub image: Tensor<T>,
    pub target: Tensor<T>,
}

impl<T: Scalar> DistillExample<T> {
    pub fn collect<S: ExampleSource<T> + ?Sized>(source: &S, targets: &TeacherTargets<'_, T>) -> Result<Vec<Self>> {
        (0..source.len())
            .into_par_iter()
            .map(|i| {
                let Example {
                    id, image, embedding, ..
                } = source.get(i)?;
                let target = match (embedding, targets) {
                    (Some(e), TeacherTargets::Cached) => e,
                    (_, TeacherTargets::Live(teacher)) => teacher.forward(&image)?.into_values(),
                    (None, TeacherTargets::Cached) => {
                        return Err(Error::config(format!(
                            "record {id} has no cached teacher embedding; run cache-embeddings first"
                        )))
                    }
                };
                Ok(Self { id, image, target })
            })
            .collect()
    }
}

pub struct EncoderDistill<T: Scalar> {
    pub student: Encoder<T>,
    pub extractor: PerceptualExtractor<T>,
    train: Vec<DistillExample<T>>,
    val: Vec<DistillExample<T>>,
    mode: LossMode,
    weights: LossWeights,
    scales: Vec<usize>,
}

impl<T: Scalar> EncoderDistill<T> {
    /// Checks shapes before any update: images must fit the student and
    /// targets must match its output.
    pub fn new(
        config: &TrainConfig,
        student: Encoder<T>,
        mut extractor: PerceptualExtractor<T>,
        train: Vec<DistillExample<T>>,
        val: Vec<DistillExample<T>>,
    ) -> Result<Self> {
        if config.phase != Phase::EncoderDistill {
            return Err(Error::config("encoder distillation needs phase = encoder_distill"));
        }
        if train.is_empty() {
            return Err(Error::config("train split is empty"));
        }
        let spec = student.spec();
        let want_in = [1, spec.in_channels, spec.input_size[0], spec.input_size[1]];
        let want_out = spec.output_shape(1);
        for ex in train.iter().chain(&val) {
            if ex.image.shape() != want_in {
                return Err(Error::shape(format!(
                    "image {} has shape {:?}, student expects {:?}",
                    ex.id,
                    ex.image.shape(),
                    want_in
                )));
            }
            if ex.target.shape() != want_out {
                return Err(Error::shape(format!(
                    "teacher embedding for {} has shape {:?}, student produces {:?}",
                    ex.id,
                    ex.target.shape(),
                    want_out
                )));
            }
        }
        extractor.params_mut().freeze();
        Ok(Self {
            student,
            extractor,
            train,
            val,
            mode: config.loss_mode,
            weights: config.loss_weights,
            scales: config.direct_scales.clone(),
        })
    }

    fn split(&self, split: Split) -> &[DistillExample<T>] {
        match split {
            Split::Train => &self.train,
            _ => &self.val,
        }
    }
}

impl<T: Scalar> Objective<T> for EncoderDistill<T> {
    fn phase(&self) -> Phase {
        Phase::EncoderDistill
    }

    fn trainable(&self) -> &ParamStore<T> {
        self.student.params()
    }

    fn trainable_mut(&mut self) -> &mut ParamStore<T> {
        self.student.params_mut()
    }

    fn frozen(&self) -> Vec<(&'static str, &ParamStore<T>)> {
        vec![("perceptual", self.extractor.params())]
    }

    fn len(&self, split: Split) -> usize {
        self.split(split).len()
    }

    fn loss(&self, tape: &mut Tape<T>, split: Split, indices: &[usize], ctx: Ctx) -> Result<LossParts> {
        let data = self.split(split);
        let images = Tensor::stack_batch(&indices.iter().map(|&i| data[i].image.clone()).collect::<Vec<_>>())?;
        let targets = Tensor::stack_batch(&indices.iter().map(|&i| data[i].target.clone()).collect::<Vec<_>>())?;
        let x = tape.constant(images);
        let s = self.student.forward_tape(tape, x, ctx)?;
        let t = tape.constant(targets);
        let mse = tape.mse(t, s)?;
        let layers = match self.mode {
            LossMode::VggOnEmbeddings => {
                let tf = self.extractor.features_tape(tape, t)?;
                let sf = self.extractor.features_tape(tape, s)?;
                tf.into_iter()
                    .zip(sf)
                    .map(|(a, b)| tape.perceptual_layer(a, b))
                    .collect::<Result<Vec<_>>>()?
            }
            LossMode::DirectFeatureMatch => self
                .scales
                .iter()
                .map(|&k| {
                    let (a, b) = if k == 1 {
                        (t, s)
                    } else {
                        (tape.avg_pool2d(t, k)?, tape.avg_pool2d(s, k)?)
                    };
                    tape.perceptual_layer(a, b)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let perceptual = tape.weighted_sum(&layers.iter().map(|&v| (v, 1.0)).collect::<Vec<_>>())?;
        let wm = tape.weighted_sum(&[(mse, self.weights.mse)])?;
        let wp = tape.weighted_sum(&[(perceptual, self.weights.perceptual)])?;
        let total = tape.add(wm, wp)?;
        Ok(LossParts {
            total,
            parts: vec![("mse", wm), ("perceptual", wp)],
        })
    }
}

/// Phase-2 sample: the frozen encoder's embedding, the binary mask and the prompt.
#[derive(Debug, Clone)]
pub struct SegExample<T: Scalar> {
    pub id: String,
    pub embedding: Tensor<T>,
    pub mask: Tensor<T>,
    pub prompt: PromptSet,
}

impl<T: Scalar> SegExample<T> {
    /// Embeds every example with `encoder` (eval mode, one image per pass) and
    /// derives its prompt. Examples with an empty mask are dropped.
    pub fn collect<S: ExampleSource<T> + ?Sized>(
        source: &S,
        encoder: &Encoder<T>,
        policy: PromptPolicy,
    ) -> Result<Vec<Self>> {
        let out: Vec<Option<Self>> = (0..source.len())
            .into_par_iter()
            .map(|i| {
                let ex = source.get(i)?;
                let (_, _, h, w) = ex.mask.values().dims4()?;
                let Some(prompt) = derive_prompt(ex.mask.values().data(), h, w, policy) else {
                    return Ok(None);
                };
                let embedding = encoder.forward(&ex.image)?.into_values();
                Ok(Some(Self {
                    id: ex.id,
                    embedding,
                    mask: ex.mask.values().clone(),
                    prompt,
                }))
            })
            .collect::<Result<_>>()?;
        let kept: Vec<Self> = out.into_iter().flatten().collect();
        if kept.len() < source.len() {
            log::info!("skipped {} examples with empty masks", source.len() - kept.len());
        }
        Ok(kept)
    }
}

pub struct DecoderFinetune<T: Scalar> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    train: Vec<SegExample<T>>,
    val: Vec<SegExample<T>>,
}

impl<T: Scalar> DecoderFinetune<T> {
    pub fn new(
        config: &TrainConfig,
        mut encoder: Encoder<T>,
        decoder: Decoder<T>,
        train: Vec<SegExample<T>>,
        val: Vec<SegExample<T>>,
    ) -> Result<Self> {
        if config.phase != Phase::DecoderFinetune {
            return Err(Error::config("decoder fine-tuning needs phase = decoder_finetune"));
        }
        let e = encoder.spec();
        let d = decoder.spec();
        if e.embed_channels != d.embed_channels || e.embed_spatial != d.embed_spatial {
            return Err(Error::shape(format!(
                "encoder emits {} channels at {:?}, decoder expects {} at {:?}",
                e.embed_channels, e.embed_spatial, d.embed_channels, d.embed_spatial
            )));
        }
        if train.is_empty() {
            return Err(Error::config("train split has no usable examples"));
        }
        for ex in train.iter().chain(&val) {
            let (_, _, h, w) = ex.mask.dims4()?;
            if [h, w] != d.output_size {
                return Err(Error::shape(format!(
                    "mask {} is {h}x{w}, decoder outputs {:?}",
                    ex.id, d.output_size
                )));
            }
        }
        encoder.params_mut().freeze();
        Ok(Self {
            encoder,
            decoder,
            train,
            val,
        })
    }

    fn split(&self, split: Split) -> &[SegExample<T>] {
        match split {
            Split::Train => &self.train,
            _ => &self.val,
        }
    }
}

impl<T: Scalar> Objective<T> for DecoderFinetune<T> {
    fn phase(&self) -> Phase {
        Phase::DecoderFinetune
    }

    fn trainable(&self) -> &ParamStore<T> {
        self.decoder.params()
    }

    fn trainable_mut(&mut self) -> &mut ParamStore<T> {
        self.decoder.params_mut()
    }

    fn frozen(&self) -> Vec<(&'static str, &ParamStore<T>)> {
        vec![("encoder", self.encoder.params())]
    }

    fn len(&self, split: Split) -> usize {
        self.split(split).len()
    }

    fn loss(&self, tape: &mut Tape<T>, split: Split, indices: &[usize], ctx: Ctx) -> Result<LossParts> {
        let data = self.split(split);
        let emb = Tensor::stack_batch(&indices.iter().map(|&i| data[i].embedding.clone()).collect::<Vec<_>>())?;
        let masks = Tensor::stack_batch(&indices.iter().map(|&i| data[i].mask.clone()).collect::<Vec<_>>())?;
        let prompts: Vec<PromptSet> = indices.iter().map(|&i| data[i].prompt.clone()).collect();
        let e = tape.constant(emb);
        let (_, probs) = self.decoder.forward_tape(tape, e, &prompts, ctx)?;
        let truth = tape.constant(masks);
        let total = tape.dice(probs, truth)?;
        Ok(LossParts {
            total,
            parts: vec![("dice", total)],
        })
    }
}
