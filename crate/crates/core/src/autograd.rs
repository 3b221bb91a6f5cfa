//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! either tracked (they receive gradients) or frozen (treated as constants,
//! so no gradient is ever produced for them).

use std::cell::Cell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, Window};
use crate::loss;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

thread_local! {
    static COMPUTE_OPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of numeric ops recorded on any tape by the current thread.
pub fn compute_ops() -> u64 {
    COMPUTE_OPS.with(|c| c.get())
}

fn bump() {
    COMPUTE_OPS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Nearest,
    Bilinear,
}

enum Op<T: Scalar> {
    Leaf,
    Param(String),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    WeightedSum(Vec<(Var, T)>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Resize {
        x: Var,
        mode: Resample,
    },
    ConcatChannels(Vec<Var>),
    Mse {
        target: Var,
        pred: Var,
    },
    PerceptualLayer {
        target: Var,
        pred: Var,
    },
    Dice {
        pred: Var,
        truth: Var,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch-norm running statistics to be written back after a training step.
#[derive(Debug, Clone)]
pub struct BufferUpdate<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    buffer_updates: Vec<BufferUpdate<T>>,
}

pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Parameters of a batch-norm layer as bound on the tape.
pub struct BatchNormArgs<'a, T> {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
    pub mean_name: String,
    pub var_name: String,
    pub training: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter. Frozen parameters become constants.
    pub fn param(&mut self, name: &str, value: &Tensor<T>, track: bool) -> Var {
        if track {
            self.push(value.clone(), Op::Param(name.to_string()), true)
        } else {
            self.push(value.clone(), Op::Leaf, false)
        }
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        bump();
        let (batch, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc_in, kh, kw) = self.value(w).dims4()?;
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv2d: input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        let win = Window { kh, kw, stride, pad };
        let (ho, wo) = win
            .out_hw(h, wd)
            .ok_or_else(|| Error::shape(format!("conv2d: kernel {kh}x{kw} larger than padded {h}x{wd}")))?;
        if let Some(b) = b {
            if self.value(b).numel() != c_out {
                return Err(Error::shape("conv2d: bias length != output channels"));
            }
        }
        let dims = ConvDims {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            ho,
            wo,
            win,
        };
        let out = kernels::conv2d_forward(
            dims,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(&[batch, c_out, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, dims }, rg))
    }

    /// Transposed convolution; weight layout is `c_in × c_out × kh × kw`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        bump();
        let (batch, c_in, h, wd) = self.value(x).dims4()?;
        let (wc_in, c_out, kh, kw) = self.value(w).dims4()?;
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv_transpose2d: input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        let ho = ((h - 1) * stride + kh)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::shape("conv_transpose2d: padding too large"))?;
        let wo = ((wd - 1) * stride + kw)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::shape("conv_transpose2d: padding too large"))?;
        let dims = ConvDims {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            ho,
            wo,
            win: Window { kh, kw, stride, pad },
        };
        let out = kernels::conv_transpose2d_forward(
            dims,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(&[batch, c_out, ho, wo], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, dims }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        bump();
        let v = self.value(x).map(|a| a.max(T::zero()));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        bump();
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        bump();
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        bump();
        let first = terms.first().ok_or_else(|| Error::shape("weighted_sum of nothing"))?;
        let mut acc = Tensor::zeros(self.value(first.0).shape());
        for &(v, w) in terms {
            let w = T::of(w);
            let scaled = self.value(v).map(|a| a * w);
            acc.add_assign(&scaled)?;
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        let terms = terms.iter().map(|&(v, w)| (v, T::of(w))).collect();
        Ok(self.push(acc, Op::WeightedSum(terms), rg))
    }

    pub fn batch_norm(&mut self, x: Var, args: BatchNormArgs<'_, T>) -> Result<Var> {
        bump();
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.value(args.gamma).numel() != c || args.running_mean.numel() != c {
            return Err(Error::shape("batch_norm: parameter length != channels"));
        }
        let hw = h * w;
        let eps = T::of(args.eps);
        let (mean, var) = if args.training {
            let (mean, var) = kernels::channel_moments(self.value(x).data(), b, c, hw);
            let m = T::of(args.momentum);
            let n = (b * hw) as f64;
            let unbias = if n > 1.0 { T::of(n / (n - 1.0)) } else { T::one() };
            let rm = Tensor::from_fn(&[c], |i| (T::one() - m) * args.running_mean.data()[i] + m * mean[i]);
            let rv = Tensor::from_fn(&[c], |i| {
                (T::one() - m) * args.running_var.data()[i] + m * var[i] * unbias
            });
            self.buffer_updates.push(BufferUpdate {
                name: args.mean_name,
                value: rm,
            });
            self.buffer_updates.push(BufferUpdate {
                name: args.var_name,
                value: rv,
            });
            (mean, var)
        } else {
            (args.running_mean.data().to_vec(), args.running_var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let gamma = self.value(args.gamma).data();
        let beta = self.value(args.beta).data();
        let mut x_hat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let s = (bi * c + ch) * hw;
                for i in s..s + hw {
                    x_hat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gamma[ch] * x_hat[i] + beta[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(args.gamma) || self.rg(args.beta);
        let value = Tensor::from_vec(&[b, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma: args.gamma,
                beta: args.beta,
                x_hat,
                inv_std,
                training: args.training,
            },
            rg,
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        bump();
        let (b, c, h, w) = self.value(x).dims4()?;
        let win = Window::new(kernel, stride, pad);
        let (ho, wo) = win
            .out_hw(h, w)
            .ok_or_else(|| Error::shape("max_pool2d: window larger than input"))?;
        let (out, arg) = kernels::max_pool2d(self.value(x).data(), b * c, h, w, win, ho, wo);
        let rg = self.rg(x);
        let value = Tensor::from_vec(&[b, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { x, arg }, rg))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        bump();
        let (b, c, h, w) = self.value(x).dims4()?;
        if k == 0 || h / k == 0 || w / k == 0 {
            return Err(Error::shape(format!("avg_pool2d: window {k} larger than {h}x{w}")));
        }
        let out = kernels::avg_pool2d(self.value(x).data(), b * c, h, w, k);
        let rg = self.rg(x);
        let value = Tensor::from_vec(&[b, c, h / k, w / k], out)?;
        Ok(self.push(value, Op::AvgPool { x, k }, rg))
    }

    /// Spatial resize to `(ho, wo)`.
    pub fn resize(&mut self, x: Var, ho: usize, wo: usize, mode: Resample) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if (h, w) == (ho, wo) {
            return Ok(x);
        }
        bump();
        let data = self.value(x).data();
        let out = match mode {
            Resample::Nearest => kernels::upsample_nearest(data, b * c, h, w, ho, wo),
            Resample::Bilinear => kernels::upsample_bilinear(data, b * c, h, w, ho, wo),
        };
        let rg = self.rg(x);
        let value = Tensor::from_vec(&[b, c, ho, wo], out)?;
        Ok(self.push(value, Op::Resize { x, mode }, rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        bump();
        let (b, _, h, w) = self.value(xs[0]).dims4()?;
        let mut total_c = 0;
        for &v in xs {
            let (b2, c2, h2, w2) = self.value(v).dims4()?;
            if (b2, h2, w2) != (b, h, w) {
                return Err(Error::shape("concat_channels: mismatched batch or spatial dims"));
            }
            total_c += c2;
        }
        let mut out = Vec::with_capacity(b * total_c * h * w);
        for bi in 0..b {
            for &v in xs {
                let t = self.value(v);
                let per = t.shape()[1] * h * w;
                out.extend_from_slice(&t.data()[bi * per..(bi + 1) * per]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        let value = Tensor::from_vec(&[b, total_c, h, w], out)?;
        Ok(self.push(value, Op::ConcatChannels(xs.to_vec()), rg))
    }

    pub fn mse(&mut self, target: Var, pred: Var) -> Result<Var> {
        bump();
        let v = loss::mse_value(self.value(target), self.value(pred))?;
        let rg = self.rg(target) || self.rg(pred);
        Ok(self.push(Tensor::scalar(v), Op::Mse { target, pred }, rg))
    }

    pub fn perceptual_layer(&mut self, target: Var, pred: Var) -> Result<Var> {
        bump();
        let v = loss::perceptual_layer_value(self.value(target), self.value(pred))?;
        let rg = self.rg(target) || self.rg(pred);
        Ok(self.push(Tensor::scalar(v), Op::PerceptualLayer { target, pred }, rg))
    }

    pub fn dice(&mut self, pred: Var, truth: Var) -> Result<Var> {
        bump();
        let v = loss::dice_value(self.value(pred), self.value(truth))?;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(v), Op::Dice { pred, truth }, rg))
    }

    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward needs a scalar root"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    *dims,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx)?)?;
                }
                self.accumulate(grads, *w, Tensor::from_vec(self.value(*w).shape(), dw)?)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_vec(self.value(*b).shape(), db)?)?;
                }
            }
            Op::ConvTranspose2d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    *dims,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx)?)?;
                }
                self.accumulate(grads, *w, Tensor::from_vec(self.value(*w).shape(), dw)?)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_vec(self.value(*b).shape(), db)?)?;
                }
            }
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, g.map(|a| a * w))?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                training,
            } => {
                let (b, c, h, w) = g.dims4()?;
                let hw = h * w;
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let s = (bi * c + ch) * hw;
                        for i in s..s + hw {
                            dgamma[ch] += gd[i] * x_hat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data();
                    let n = T::of((b * hw) as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let s = (bi * c + ch) * hw;
                            let k = gam[ch] * inv_std[ch];
                            for i in s..s + hw {
                                dx[i] = if *training {
                                    k / n * (n * gd[i] - dbeta[ch] - x_hat[i] * dgamma[ch])
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(g.shape(), dx)?)?;
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta)?)?;
            }
            Op::MaxPool { x, arg } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&src, &gv) in arg.iter().zip(g.data()) {
                    d[src] += gv;
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::AvgPool { x, k } => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let dx = kernels::avg_pool2d_backward(g.data(), b * c, h, w, *k);
                self.accumulate(grads, *x, Tensor::from_vec(&[b, c, h, w], dx)?)?;
            }
            Op::Resize { x, mode } => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let (_, _, ho, wo) = g.dims4()?;
                let dx = match mode {
                    Resample::Nearest => kernels::upsample_nearest_backward(g.data(), b * c, h, w, ho, wo),
                    Resample::Bilinear => kernels::upsample_bilinear_backward(g.data(), b * c, h, w, ho, wo),
                };
                self.accumulate(grads, *x, Tensor::from_vec(&[b, c, h, w], dx)?)?;
            }
            Op::ConcatChannels(xs) => {
                let (b, _, h, w) = g.dims4()?;
                let total_per = g.numel() / b;
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    let per = c * h * w;
                    let mut part = Vec::with_capacity(b * per);
                    for bi in 0..b {
                        let s = bi * total_per + offset;
                        part.extend_from_slice(&g.data()[s..s + per]);
                    }
                    offset += per;
                    self.accumulate(grads, v, Tensor::from_vec(&[b, c, h, w], part)?)?;
                }
            }
            Op::Mse { target, pred } => {
                let s = g.data()[0];
                let dp = loss::mse_grad(self.value(*target), self.value(*pred))?;
                if self.rg(*target) {
                    self.accumulate(grads, *target, dp.map(|a| -a * s))?;
                }
                self.accumulate(grads, *pred, dp.map(|a| a * s))?;
            }
            Op::PerceptualLayer { target, pred } => {
                let s = g.data()[0];
                let dp = loss::perceptual_layer_grad(self.value(*target), self.value(*pred))?;
                if self.rg(*target) {
                    self.accumulate(grads, *target, dp.map(|a| -a * s))?;
                }
                self.accumulate(grads, *pred, dp.map(|a| a * s))?;
            }
            Op::Dice { pred, truth } => {
                let s = g.data()[0];
                let dp = loss::dice_grad(self.value(*pred), self.value(*truth))?;
                self.accumulate(grads, *pred, dp.map(|a| a * s))?;
            }
        }
        Ok(())
    }

    /// Gradients of every tracked parameter, keyed by parameter name.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                match out.get_mut(name) {
                    Some(acc) => {
                        // the same parameter bound twice
                        acc.add_assign(g).expect("parameter bound with two shapes");
                    }
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        out
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
