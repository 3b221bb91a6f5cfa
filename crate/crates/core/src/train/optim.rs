use std::collections::BTreeMap;

use super::OptimizerConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with coupled L2 weight decay (`g ← g + λ·θ` before the moment update).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Zero moments for every trainable weight of `store`.
    pub fn new(config: OptimizerConfig, store: &ParamStore<T>) -> Self {
        let mut m = BTreeMap::new();
        for (name, p) in store.iter() {
            if store.is_trainable(name) && p.kind == ParamKind::Weight {
                m.insert(name.to_string(), Tensor::zeros(p.value.shape()));
            }
        }
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update at learning rate `lr`. Every tracked parameter must have a gradient
    /// entry; parameters without one (unused in the forward pass) are left alone.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (lr, eps, wd) = (T::of(lr), T::of(c.eps), T::of(c.weight_decay));
        for (name, g) in grads {
            let (Some(m), Some(v)) = (self.m.get_mut(name), self.v.get_mut(name)) else {
                return Err(Error::config(format!("gradient for non-trainable parameter {name}")));
            };
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
            p.expect_same_shape(g)?;
            let (pd, gd) = (p.data_mut(), g.data());
            for (i, w) in pd.iter_mut().enumerate() {
                let gi = gd[i] + wd * *w;
                let mi = b1 * m.data()[i] + ob1 * gi;
                let vi = b2 * v.data()[i] + ob2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                *w -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
