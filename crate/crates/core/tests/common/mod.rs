#![allow(dead_code)]

use kdseg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn binary(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Elementwise relative error with a small absolute floor in the denominator.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-7))
        .fold(0.0, f64::max)
}

/// Central differences of `f` around `x`.
pub fn numeric_grad(x: &Tensor<f64>, step: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += step;
            let mut m = x.clone();
            m.data_mut()[i] -= step;
            (f(&p) - f(&m)) / (2.0 * step)
        })
        .collect()
}

use kdseg::data::{prepare, synthesize, Example, InMemorySplit, Preprocessing, SyntheticSpec};
use kdseg::Scalar;

/// Generated shapes, preprocessed in memory (no files). Images are
/// normalized with mean 0.5 / std 0.25 at their native `size`.
pub fn shape_examples<T: Scalar>(n: usize, size: usize, seed: u64, offset: usize) -> Vec<Example<T>> {
    let spec = SyntheticSpec {
        n: n + offset,
        canvas: [size, size],
        seed,
    };
    let prep = Preprocessing {
        resize_to: [size, size],
        mean: [0.5; 3],
        std: [0.25; 3],
    };
    (offset..offset + n)
        .map(|i| {
            let s = synthesize(&spec, i);
            let plane = size * size;
            let image = Tensor::from_fn(&[1, 3, size, size], |k| {
                let (c, p) = (k / plane, k % plane);
                T::of(f64::from(s.rgb[p * 3 + c]) / 255.0)
            });
            let mask = Tensor::from_fn(&[1, 1, size, size], |k| T::of(f64::from(s.mask[k]) / 255.0));
            let (image, mask) = prepare(&image, &mask, &prep).unwrap();
            Example {
                id: s.id,
                image,
                mask,
                embedding: None,
            }
        })
        .collect()
}

pub fn shape_split<T: Scalar>(n: usize, size: usize, seed: u64, offset: usize) -> InMemorySplit<T> {
    InMemorySplit::new(shape_examples(n, size, seed, offset))
}

// element-loop oracles

pub fn mse_oracle(t: &Tensor<f64>, s: &Tensor<f64>) -> f64 {
    let [b, c, h, w] = <[usize; 4]>::try_from(t.shape()).unwrap();
    let mut acc = 0.0;
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let d = t.at4(bi, ci, y, x) - s.at4(bi, ci, y, x);
                    acc += d * d;
                }
            }
        }
    }
    acc / (b * c * h * w) as f64
}

pub fn perceptual_layer_oracle(t: &Tensor<f64>, s: &Tensor<f64>) -> f64 {
    let [b, c, h, w] = <[usize; 4]>::try_from(t.shape()).unwrap();
    let mut total = 0.0;
    for bi in 0..b {
        let mut acc = 0.0;
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let d = t.at4(bi, ci, y, x) - s.at4(bi, ci, y, x);
                    acc += d * d;
                }
            }
        }
        total += acc / (c * h * w) as f64;
    }
    total / b as f64
}

pub fn dice_loss_oracle(p: &Tensor<f64>, g: &Tensor<f64>) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for i in 0..p.numel() {
        inter += p.data()[i] * g.data()[i];
        sp += p.data()[i];
        sg += g.data()[i];
    }
    1.0 - (2.0 * inter + kdseg::loss::DICE_EPS) / (sp + sg + kdseg::loss::DICE_EPS)
}

pub fn dice_metric_oracle(p: &Tensor<f64>, g: &Tensor<f64>, thr: f64) -> f64 {
    let [b, _, h, w] = <[usize; 4]>::try_from(p.shape()).unwrap();
    let mut sum = 0.0;
    for bi in 0..b {
        let (mut tp, mut fp, mut fneg) = (0u32, 0u32, 0u32);
        for y in 0..h {
            for x in 0..w {
                let pf = p.at4(bi, 0, y, x) >= thr;
                let gf = g.at4(bi, 0, y, x) >= 0.5;
                match (pf, gf) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
        }
        sum += if tp + fp + fneg == 0 {
            1.0
        } else {
            f64::from(2 * tp) / f64::from(2 * tp + fp + fneg)
        };
    }
    sum / b as f64
}
