use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_dataset, DatasetManifest, Preprocessing, SplitSpec};
use crate::error::{Error, Result};

/// One foreground primitive in pixel coordinates (pixel `(x, y)` covers
/// `[x, x+1) × [y, y+1)` and is tested at its centre).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeDesc {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl ShapeDesc {
    pub fn contains(&self, px: usize, py: usize) -> bool {
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        match *self {
            ShapeDesc::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            ShapeDesc::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    /// `(height, width)`.
    pub canvas: [usize; 2],
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("synthetic dataset needs n >= 1"));
        }
        if self.canvas.iter().any(|&v| v < 8) {
            return Err(Error::config("synthetic canvas must be at least 8x8"));
        }
        Ok(())
    }

    pub fn id(index: usize) -> String {
        format!("syn_{index:05}")
    }
}

/// Raw generated sample: interleaved RGB bytes and a 0/255 mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
    pub mask: Vec<u8>,
    pub shapes: Vec<ShapeDesc>,
}

/// Generates sample `index` of the dataset. Depends only on `(seed, index)`.
pub fn synthesize(spec: &SyntheticSpec, index: usize) -> SyntheticSample {
    let [h, w] = spec.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let n_shapes = rng.gen_range(1..=3);
    let min_side = h.min(w) as f64;
    let shapes: Vec<ShapeDesc> = (0..n_shapes)
        .map(|_| {
            // centres sit on pixel centres, so the centre pixel is always foreground
            let cx = rng.gen_range(0..w) as f64 + 0.5;
            let cy = rng.gen_range(0..h) as f64 + 0.5;
            let lo = (min_side / 10.0).max(1.0);
            let hi = (min_side / 4.0).max(lo + 1.0);
            let (a, b) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
            if rng.gen_bool(0.5) {
                ShapeDesc::Ellipse { cx, cy, rx: a, ry: b }
            } else {
                ShapeDesc::Rect {
                    x0: cx - a,
                    y0: cy - b,
                    x1: cx + a,
                    y1: cy + b,
                }
            }
        })
        .collect();

    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(30.0..100.0));
    let fg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(150.0..230.0));
    let (fy, fx, phase) = (
        rng.gen_range(0.05..0.3),
        rng.gen_range(0.05..0.3),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );

    let mut rgb = vec![0u8; h * w * 3];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let inside = shapes.iter().any(|s| s.contains(x, y));
            let texture = 15.0 * ((x as f64 * fx + y as f64 * fy + phase).sin());
            for c in 0..3 {
                let base = if inside { fg[c] } else { bg[c] + texture };
                let v = base + rng.gen_range(-12.0..12.0);
                rgb[(y * w + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
            mask[y * w + x] = if inside { 255 } else { 0 };
        }
    }
    SyntheticSample {
        id: SyntheticSpec::id(index),
        height: h,
        width: w,
        rgb,
        mask,
        shapes,
    }
}

fn save_png(path: &Path, w: usize, h: usize, data: Vec<u8>, color: image::ExtendedColorType) -> Result<()> {
    image::save_buffer(path, &data, w as u32, h as u32, color).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    })
}

/// Writes `n` generated pairs under `root` (`images/`, `masks/`, and
/// `shapes.json` with the analytic shapes) and loads them as a manifest.
pub fn generate_synthetic(
    root: &Path,
    spec: &SyntheticSpec,
    split: &SplitSpec,
    preprocessing: Preprocessing,
) -> Result<DatasetManifest> {
    spec.validate()?;
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let samples: Vec<SyntheticSample> = {
        use rayon::prelude::*;
        (0..spec.n).into_par_iter().map(|i| synthesize(spec, i)).collect()
    };
    let mut shapes = BTreeMap::new();
    for s in samples {
        save_png(
            &root.join("images").join(format!("{}.png", s.id)),
            s.width,
            s.height,
            s.rgb,
            image::ExtendedColorType::Rgb8,
        )?;
        save_png(
            &root.join("masks").join(format!("{}.png", s.id)),
            s.width,
            s.height,
            s.mask,
            image::ExtendedColorType::L8,
        )?;
        shapes.insert(s.id, s.shapes);
    }
    let shapes_path = root.join("shapes.json");
    let json = serde_json::to_vec_pretty(&shapes).expect("shapes serialize");
    std::fs::write(&shapes_path, json).map_err(|e| Error::io(&shapes_path, e))?;
    load_dataset(root, "synthetic", split, preprocessing)
}
