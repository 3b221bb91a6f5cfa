use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SampleRecord;
use crate::error::{Error, Result};
use crate::kernels;
use crate::loss::SegmentationMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Target resolution and per-channel normalization applied to `[0, 1]` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocessing {
    /// `(height, width)`.
    pub resize_to: [usize; 2],
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Preprocessing {
    /// ImageNet statistics at the 1024-pixel input size of the teacher.
    fn default() -> Self {
        Self {
            resize_to: [1024, 1024],
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Preprocessing {
    pub fn sized(size: usize) -> Self {
        Self {
            resize_to: [size, size],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize_to.contains(&0) {
            return Err(Error::config("resize_to must be positive"));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("normalization needs finite means and positive stds"));
        }
        Ok(())
    }
}

fn decode_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, other.to_string()),
        ),
    }
}

/// Loads an image as a `1×3×H×W` tensor with values in `[0, 1]`.
pub fn load_image_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| decode_error(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let plane = h * w;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::of(px[c] as f64 / 255.0);
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data)
}

/// Loads a mask as a `1×1×H×W` tensor in `[0, 1]` (luma / 255).
pub fn load_mask<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| decode_error(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| T::of(v as f64 / 255.0)).collect();
    Tensor::from_vec(&[1, 1, h, w], data)
}

pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, ho: usize, wo: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (ho, wo) {
        return Ok(x.clone());
    }
    Tensor::from_vec(
        &[b, c, ho, wo],
        kernels::upsample_bilinear(x.data(), b * c, h, w, ho, wo),
    )
}

pub fn resize_nearest<T: Scalar>(x: &Tensor<T>, ho: usize, wo: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (ho, wo) {
        return Ok(x.clone());
    }
    Tensor::from_vec(
        &[b, c, ho, wo],
        kernels::upsample_nearest(x.data(), b * c, h, w, ho, wo),
    )
}

/// Resize + normalize an already decoded image, and resize + binarize its mask.
pub fn prepare<T: Scalar>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
    spec: &Preprocessing,
) -> Result<(Tensor<T>, SegmentationMask<T>)> {
    let [ho, wo] = spec.resize_to;
    let mut img = resize_bilinear(image, ho, wo)?;
    let plane = ho * wo;
    for (c, chunk) in img.data_mut().chunks_mut(plane).enumerate() {
        let (m, s) = (T::of(spec.mean[c % 3]), T::of(spec.std[c % 3]));
        for v in chunk {
            *v = (*v - m) / s;
        }
    }
    let half = T::of(0.5);
    let m = resize_nearest(mask, ho, wo)?.map(|v| if v >= half { T::one() } else { T::zero() });
    Ok((img, SegmentationMask::binary(m)?))
}

/// Reads a record's files and returns the network-ready image (`1×3×H×W`)
/// and binary mask (`1×1×H×W`).
pub fn preprocess<T: Scalar>(record: &SampleRecord, spec: &Preprocessing) -> Result<(Tensor<T>, SegmentationMask<T>)> {
    let image = load_image_rgb::<T>(&record.image_path)?;
    let mask = load_mask::<T>(&record.mask_path)?;
    prepare(&image, &mask, spec)
}
