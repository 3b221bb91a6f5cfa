//! Parameter storage and the layer primitives shared by every model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{BatchNormArgs, BufferUpdate, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable weight; counted and optimized unless frozen.
    Weight,
    /// Running statistic; saved with the model but never optimized.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Named parameters of one model, ordered by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: BTreeMap<String, Param<T>>,
    frozen: bool,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            frozen: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) {
        self.params.insert(name.into(), Param { value, kind });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.params.get(name).map(|p| p.kind)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Marks every weight as non-trainable.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen && self.kind(name) == Some(ParamKind::Weight)
    }

    /// Count of scalar weights that an optimizer would update.
    pub fn trainable_count(&self) -> u64 {
        if self.frozen {
            return 0;
        }
        self.weight_count()
    }

    /// Count of scalar weights regardless of freezing.
    pub fn weight_count(&self) -> u64 {
        self.params
            .values()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.numel() as u64)
            .sum()
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Weights(format!("unknown parameter {name}")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::Weights(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<BufferUpdate<T>>) -> Result<()> {
        for u in updates {
            self.set(&u.name, u.value)?;
        }
        Ok(())
    }

    /// Copies every parameter of `other` (names and shapes must agree).
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Weights(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (name, p) in &other.params {
            self.set(name, p.value.clone())?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values, in name order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(T::DTYPE.name().as_bytes());
        for (name, p) in &self.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn bind(&self, tape: &mut Tape<T>, name: &str, track: bool) -> Result<Var> {
        let value = self.get(name)?;
        Ok(tape.param(name, value, track && self.is_trainable(name)))
    }
}

/// Deterministic per-parameter initializer: each tensor draws from its own
/// stream keyed by `(seed, name)`, so layer order never changes the values.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }

    pub fn uniform<T: Scalar>(&self, name: &str, shape: &[usize], bound: f64) -> Tensor<T> {
        let mut rng = self.rng(name);
        Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)))
    }

    /// He-uniform: `U(−√(6/fan_in), √(6/fan_in))`.
    pub fn he<T: Scalar>(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(name, shape, (6.0 / fan_in.max(1) as f64).sqrt())
    }
}

/// Train/eval switch and whether parameters should receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ctx {
    pub training: bool,
    pub track: bool,
}

impl Ctx {
    pub const EVAL: Ctx = Ctx {
        training: false,
        track: false,
    };
    pub const TRAIN: Ctx = Ctx {
        training: true,
        track: true,
    };
}

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            stride: 1,
            pad: kernel / 2,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    fn bias_name(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> u64 {
        let w: usize = self.weight_shape().iter().product();
        (w + if self.bias { self.c_out } else { 0 }) as u64
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, init: Init) {
        let fan_in = self.c_in * self.kernel * self.kernel;
        let wn = self.weight_name();
        store.insert(
            wn.clone(),
            init.he(&wn, &self.weight_shape(), fan_in),
            ParamKind::Weight,
        );
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.c_out]), ParamKind::Weight);
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ctx: Ctx) -> Result<Var> {
        let w = store.bind(tape, &self.weight_name(), ctx.track)?;
        let b = if self.bias {
            Some(store.bind(tape, &self.bias_name(), ctx.track)?)
        } else {
            None
        };
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed convolution with weight layout `c_in × c_out × k × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    pub fn param_count(&self) -> u64 {
        (self.c_in * self.c_out * self.kernel * self.kernel + self.c_out) as u64
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, init: Init) {
        let wn = join(&self.name, "weight");
        let fan_in = (self.c_in * self.kernel * self.kernel / (self.stride * self.stride)).max(1);
        store.insert(
            wn.clone(),
            init.he(&wn, &[self.c_in, self.c_out, self.kernel, self.kernel], fan_in),
            ParamKind::Weight,
        );
        store.insert(
            join(&self.name, "bias"),
            Tensor::zeros(&[self.c_out]),
            ParamKind::Weight,
        );
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ctx: Ctx) -> Result<Var> {
        let w = store.bind(tape, &join(&self.name, "weight"), ctx.track)?;
        let b = store.bind(tape, &join(&self.name, "bias"), ctx.track)?;
        tape.conv_transpose2d(x, w, Some(b), self.stride, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn param_count(&self) -> u64 {
        2 * self.channels as u64
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let c = self.channels;
        store.insert(
            join(&self.name, "weight"),
            Tensor::full(&[c], T::one()),
            ParamKind::Weight,
        );
        store.insert(join(&self.name, "bias"), Tensor::zeros(&[c]), ParamKind::Weight);
        store.insert(join(&self.name, "running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer);
        store.insert(
            join(&self.name, "running_var"),
            Tensor::full(&[c], T::one()),
            ParamKind::Buffer,
        );
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ctx: Ctx) -> Result<Var> {
        let gamma = store.bind(tape, &join(&self.name, "weight"), ctx.track)?;
        let beta = store.bind(tape, &join(&self.name, "bias"), ctx.track)?;
        let mean_name = join(&self.name, "running_mean");
        let var_name = join(&self.name, "running_var");
        tape.batch_norm(
            x,
            BatchNormArgs {
                gamma,
                beta,
                running_mean: store.get(&mean_name)?,
                running_var: store.get(&var_name)?,
                mean_name,
                var_name,
                // frozen models always normalize with running statistics
                training: ctx.training && !store.is_frozen(),
                momentum: Self::MOMENTUM,
                eps: Self::EPS,
            },
        )
    }
}
