//! Distillation and segmentation objectives.
//!
//! * [`mse_loss`]: mean squared error between teacher and student embeddings.
//! * [`perceptual_loss`]: per-layer squared feature distance, each layer
//!   normalized by `C·H·W` and averaged over the batch, summed over layers.
//! * [`combined_loss`]: `mse + perceptual`, components kept for bookkeeping.
//! * [`dice_loss`]: smoothed soft Dice loss over all pixels of the batch.
//! * [`dice_metric`]: hard Dice coefficient after thresholding, averaged per image.
//!
//! Each loss has a matching `*_grad` returning the analytic gradient with
//! respect to the student (or predicted) operand; the autograd tape uses these.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smoothing added to numerator and denominator of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

/// Default binarization threshold for [`dice_metric`].
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Dense activation tensor `(batch, channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Scalar> {
    values: Tensor<T>,
    layer_id: Option<String>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let (b, c, h, w) = values.dims4()?;
        if b == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "feature map dims must be >= 1, got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(Error::Numerics("feature map contains NaN or Inf".into()));
        }
        Ok(Self { values, layer_id: None })
    }

    pub fn with_layer(mut self, id: impl Into<String>) -> Self {
        self.layer_id = Some(id.into());
        self
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn layer_id(&self) -> Option<&str> {
        self.layer_id.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Entries in `[0, 1]`.
    Probability,
    /// Entries in `{0, 1}`.
    Binary,
}

/// Single-channel mask `(batch, 1, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask<T: Scalar> {
    values: Tensor<T>,
    kind: MaskKind,
}

impl<T: Scalar> SegmentationMask<T> {
    pub fn new(values: Tensor<T>, kind: MaskKind) -> Result<Self> {
        let (_, c, _, _) = values.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!(
                "mask must have one channel, got shape {:?}",
                values.shape()
            )));
        }
        let ok = match kind {
            MaskKind::Probability => values.data().iter().all(|&v| v >= T::zero() && v <= T::one()),
            MaskKind::Binary => values.data().iter().all(|&v| v == T::zero() || v == T::one()),
        };
        if !ok {
            return Err(Error::Domain(format!("mask values violate {kind:?} range")));
        }
        Ok(Self { values, kind })
    }

    pub fn probability(values: Tensor<T>) -> Result<Self> {
        Self::new(values, MaskKind::Probability)
    }

    pub fn binary(values: Tensor<T>) -> Result<Self> {
        Self::new(values, MaskKind::Binary)
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn foreground(&self) -> T {
        self.values.sum()
    }
}

/// Scalar loss with optional named parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub scalar: T,
    pub components: Vec<(&'static str, T)>,
}

impl<T: Scalar> LossValue<T> {
    pub fn plain(scalar: T) -> Self {
        Self {
            scalar,
            components: Vec::new(),
        }
    }

    pub fn component(&self, name: &str) -> Option<T> {
        self.components.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    /// `|scalar − Σ components| ≤ 1e-9 · max(1, scalar)`; vacuous without components.
    pub fn is_consistent(&self) -> bool {
        if self.components.is_empty() {
            return true;
        }
        let total: f64 = self.components.iter().map(|(_, v)| v.to_f64_lossless()).sum();
        let s = self.scalar.to_f64_lossless();
        (s - total).abs() <= 1e-9 * s.max(1.0)
    }
}

/// Relative weights of the two distillation terms. The unweighted sum is the default.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mse: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            perceptual: 1.0,
        }
    }
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if !a.all_finite() || !b.all_finite() {
        return Err(Error::Numerics(format!("{what}: non-finite input")));
    }
    Ok(())
}

/// Mean of `(teacher − student)²` over all elements.
pub fn mse_loss<T: Scalar>(teacher: &FeatureMap<T>, student: &FeatureMap<T>) -> Result<LossValue<T>> {
    Ok(LossValue::plain(mse_value(teacher.values(), student.values())?))
}

pub fn mse_value<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<T> {
    check_pair(teacher, student, "mse_loss")?;
    let n = T::of(teacher.numel() as f64);
    let sum: T = teacher
        .data()
        .iter()
        .zip(student.data())
        .map(|(&t, &s)| (t - s) * (t - s))
        .sum();
    Ok(sum / n)
}

/// `∂ mse / ∂ student = 2 (student − teacher) / N`.
pub fn mse_grad<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(teacher, student, "mse_grad")?;
    let k = T::of(2.0 / teacher.numel() as f64);
    student.zip_map(teacher, |s, t| k * (s - t))
}

/// One perceptual layer: squared distance normalized by `C·H·W`, averaged over the batch.
pub fn perceptual_layer_value<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<T> {
    check_pair(teacher, student, "perceptual_loss")?;
    let (b, c, h, w) = teacher.dims4()?;
    let per = c * h * w;
    let norm = T::of(per as f64);
    let mut total = T::zero();
    for bi in 0..b {
        let range = bi * per..(bi + 1) * per;
        let s: T = teacher.data()[range.clone()]
            .iter()
            .zip(&student.data()[range])
            .map(|(&t, &s)| (t - s) * (t - s))
            .sum();
        total += s / norm;
    }
    Ok(total / T::of(b as f64))
}

pub fn perceptual_layer_grad<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(teacher, student, "perceptual_grad")?;
    let (b, c, h, w) = teacher.dims4()?;
    let k = T::of(2.0 / (b * c * h * w) as f64);
    student.zip_map(teacher, |s, t| k * (s - t))
}

fn check_layers<T: Scalar>(teacher: &[FeatureMap<T>], student: &[FeatureMap<T>]) -> Result<()> {
    if teacher.is_empty() || student.is_empty() {
        return Err(Error::config("perceptual loss needs at least one layer"));
    }
    if teacher.len() != student.len() {
        return Err(Error::config(format!(
            "perceptual loss layer count mismatch: {} vs {}",
            teacher.len(),
            student.len()
        )));
    }
    Ok(())
}

pub fn perceptual_loss<T: Scalar>(
    teacher_feats: &[FeatureMap<T>],
    student_feats: &[FeatureMap<T>],
) -> Result<LossValue<T>> {
    check_layers(teacher_feats, student_feats)?;
    let mut total = T::zero();
    for (t, s) in teacher_feats.iter().zip(student_feats) {
        total += perceptual_layer_value(t.values(), s.values())?;
    }
    Ok(LossValue::plain(total))
}

/// Gradient of [`perceptual_loss`] with respect to each student layer.
pub fn perceptual_grad<T: Scalar>(
    teacher_feats: &[FeatureMap<T>],
    student_feats: &[FeatureMap<T>],
) -> Result<Vec<Tensor<T>>> {
    check_layers(teacher_feats, student_feats)?;
    teacher_feats
        .iter()
        .zip(student_feats)
        .map(|(t, s)| perceptual_layer_grad(t.values(), s.values()))
        .collect()
}

pub fn combined_loss<T: Scalar>(
    teacher: &FeatureMap<T>,
    student: &FeatureMap<T>,
    teacher_feats: &[FeatureMap<T>],
    student_feats: &[FeatureMap<T>],
) -> Result<LossValue<T>> {
    combined_loss_weighted(teacher, student, teacher_feats, student_feats, LossWeights::default())
}

/// Components are reported already weighted, so they always sum to the scalar.
pub fn combined_loss_weighted<T: Scalar>(
    teacher: &FeatureMap<T>,
    student: &FeatureMap<T>,
    teacher_feats: &[FeatureMap<T>],
    student_feats: &[FeatureMap<T>],
    weights: LossWeights,
) -> Result<LossValue<T>> {
    let mse = mse_loss(teacher, student)?.scalar * T::of(weights.mse);
    let perceptual = perceptual_loss(teacher_feats, student_feats)?.scalar * T::of(weights.perceptual);
    Ok(LossValue {
        scalar: mse + perceptual,
        components: vec![("mse", mse), ("perceptual", perceptual)],
    })
}

fn check_dice_inputs<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(format!("dice: {:?} vs {:?}", pred.shape(), truth.shape())));
    }
    if pred.data().iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
        return Err(Error::Domain("dice: prediction outside [0, 1]".into()));
    }
    Ok(())
}

/// Raw sums `(Σ p·g, Σ p, Σ g)`.
fn dice_sums<T: Scalar>(pred: &[T], truth: &[T]) -> (T, T, T) {
    let mut inter = T::zero();
    let mut sp = T::zero();
    let mut sg = T::zero();
    for (&p, &g) in pred.iter().zip(truth) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    (inter, sp, sg)
}

pub fn dice_value<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<T> {
    check_dice_inputs(pred, truth)?;
    let eps = T::of(DICE_EPS);
    let (inter, sp, sg) = dice_sums(pred.data(), truth.data());
    let two = T::of(2.0);
    Ok(T::one() - (two * inter + eps) / (sp + sg + eps))
}

pub fn dice_loss<T: Scalar>(pred: &SegmentationMask<T>, truth: &SegmentationMask<T>) -> Result<LossValue<T>> {
    if truth.kind() != MaskKind::Binary {
        return Err(Error::Domain("dice_loss: ground truth must be binary".into()));
    }
    Ok(LossValue::plain(dice_value(pred.values(), truth.values())?))
}

/// `∂L/∂p_i = ((2I + ε) − 2 g_i S) / S²` with `S = Σp + Σg + ε`.
pub fn dice_grad<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Tensor<T>> {
    check_dice_inputs(pred, truth)?;
    let eps = T::of(DICE_EPS);
    let two = T::of(2.0);
    let (inter, sp, sg) = dice_sums(pred.data(), truth.data());
    let s = sp + sg + eps;
    let num = two * inter + eps;
    let s2 = s * s;
    Ok(truth.map(|g| (num - two * g * s) / s2))
}

/// Hard Dice per batch item. Prediction is foreground where `p >= threshold`,
/// truth where `g >= 0.5`. Two empty masks score 1.
pub fn dice_per_image<T: Scalar>(
    pred: &SegmentationMask<T>,
    truth: &SegmentationMask<T>,
    threshold: f64,
) -> Result<Vec<f64>> {
    let (p, g) = (pred.values(), truth.values());
    if p.shape() != g.shape() {
        return Err(Error::shape(format!("dice_metric: {:?} vs {:?}", p.shape(), g.shape())));
    }
    let (b, _, h, w) = p.dims4()?;
    let per = h * w;
    let thr = T::of(threshold);
    let half = T::of(0.5);
    Ok((0..b)
        .map(|bi| {
            let range = bi * per..(bi + 1) * per;
            let (mut both, mut np, mut ng) = (0usize, 0usize, 0usize);
            for (&pv, &gv) in p.data()[range.clone()].iter().zip(&g.data()[range]) {
                let pf = pv >= thr;
                let gf = gv >= half;
                np += pf as usize;
                ng += gf as usize;
                both += (pf && gf) as usize;
            }
            if np + ng == 0 {
                1.0
            } else {
                2.0 * both as f64 / (np + ng) as f64
            }
        })
        .collect())
}

pub fn dice_metric<T: Scalar>(pred: &SegmentationMask<T>, truth: &SegmentationMask<T>, threshold: f64) -> Result<f64> {
    let per = dice_per_image(pred, truth, threshold)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}
