//! Point and box prompts, how they are derived from ground truth, and how they
//! are rasterized for the decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum PromptType {
    Point,
    Box,
}

/// Coordinates are in input-image pixels, `x` to the right, `y` down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompt {
    Point { x: f64, y: f64 },
    Box { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Prompt {
    pub fn kind(&self) -> PromptType {
        match self {
            Prompt::Point { .. } => PromptType::Point,
            Prompt::Box { .. } => PromptType::Box,
        }
    }
}

/// Prompts for one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptSet(pub Vec<Prompt>);

impl PromptSet {
    pub fn single(p: Prompt) -> Self {
        Self(vec![p])
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptPolicy {
    /// One point at the mask centroid, snapped to the nearest foreground pixel.
    #[default]
    CentroidPoint,
    /// The tight bounding box of the foreground.
    BoundingBox,
}

impl PromptPolicy {
    pub fn prompt_type(self) -> PromptType {
        match self {
            PromptPolicy::CentroidPoint => PromptType::Point,
            PromptPolicy::BoundingBox => PromptType::Box,
        }
    }
}

/// Prompt for a single `H×W` ground-truth plane (values ≥ 0.5 are foreground).
/// Returns `None` when the mask has no foreground.
pub fn derive_prompt<T: Scalar>(mask: &[T], h: usize, w: usize, policy: PromptPolicy) -> Option<PromptSet> {
    let half = T::of(0.5);
    let fg: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| mask[y * w + x] >= half)
        .collect();
    if fg.is_empty() {
        return None;
    }
    let prompt = match policy {
        PromptPolicy::CentroidPoint => {
            let n = fg.len() as f64;
            let cy = fg.iter().map(|&(y, _)| y as f64 + 0.5).sum::<f64>() / n;
            let cx = fg.iter().map(|&(_, x)| x as f64 + 0.5).sum::<f64>() / n;
            // first pixel in scan order wins ties
            let mut best = fg[0];
            let mut best_d = f64::INFINITY;
            for &(y, x) in &fg {
                let d = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                if d < best_d {
                    best_d = d;
                    best = (y, x);
                }
            }
            Prompt::Point {
                x: best.1 as f64 + 0.5,
                y: best.0 as f64 + 0.5,
            }
        }
        PromptPolicy::BoundingBox => {
            let y0 = fg.iter().map(|p| p.0).min().unwrap();
            let y1 = fg.iter().map(|p| p.0).max().unwrap();
            let x0 = fg.iter().map(|p| p.1).min().unwrap();
            let x1 = fg.iter().map(|p| p.1).max().unwrap();
            Prompt::Box {
                x0: x0 as f64,
                y0: y0 as f64,
                x1: x1 as f64 + 1.0,
                y1: y1 as f64 + 1.0,
            }
        }
    };
    Some(PromptSet::single(prompt))
}

/// Rasterizes prompts onto a `grid_h × grid_w` map covering an `image_h × image_w`
/// image. One channel per entry of `types`: points become unit-peak Gaussians
/// (σ = one grid cell, overlapping points take the max), boxes become the
/// indicator of cells whose centres fall inside.
pub fn rasterize<T: Scalar>(
    prompts: &[PromptSet],
    types: &[PromptType],
    image: [usize; 2],
    grid: [usize; 2],
) -> Result<Tensor<T>> {
    let [gh, gw] = grid;
    let sy = image[0] as f64 / gh as f64;
    let sx = image[1] as f64 / gw as f64;
    let b = prompts.len();
    let mut out = Tensor::<T>::zeros(&[b, types.len(), gh, gw]);
    let data = out.data_mut();
    for (bi, set) in prompts.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::Prompt(format!("image {bi} has no prompts")));
        }
        for p in &set.0 {
            let ch = types
                .iter()
                .position(|t| *t == p.kind())
                .ok_or_else(|| Error::Prompt(format!("decoder does not accept {:?} prompts", p.kind())))?;
            let plane = &mut data[(bi * types.len() + ch) * gh * gw..(bi * types.len() + ch + 1) * gh * gw];
            match *p {
                Prompt::Point { x, y } => {
                    let (px, py) = (x / sx, y / sy);
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let d2 = (gx as f64 + 0.5 - px).powi(2) + (gy as f64 + 0.5 - py).powi(2);
                            let v = T::of((-0.5 * d2).exp());
                            let cell = &mut plane[gy * gw + gx];
                            *cell = cell.max(v);
                        }
                    }
                }
                Prompt::Box { x0, y0, x1, y1 } => {
                    let mut any = false;
                    for gy in 0..gh {
                        let cy = (gy as f64 + 0.5) * sy;
                        for gx in 0..gw {
                            let cx = (gx as f64 + 0.5) * sx;
                            if cx >= x0 && cx < x1 && cy >= y0 && cy < y1 {
                                plane[gy * gw + gx] = T::one();
                                any = true;
                            }
                        }
                    }
                    if !any {
                        let gx = (((x0 + x1) * 0.5 / sx) as usize).min(gw - 1);
                        let gy = (((y0 + y1) * 0.5 / sy) as usize).min(gh - 1);
                        plane[gy * gw + gx] = T::one();
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centroid_snaps_into_foreground() {
        // an L shape whose centroid lies outside the foreground
        let mut m = vec![0.0f64; 25];
        for i in 0..5 {
            m[i * 5] = 1.0; // left column
            m[20 + i] = 1.0; // bottom row
        }
        let p = derive_prompt(&m, 5, 5, PromptPolicy::CentroidPoint).unwrap();
        let Prompt::Point { x, y } = p.0[0] else { panic!() };
        let (px, py) = ((x - 0.5) as usize, (y - 0.5) as usize);
        assert_eq!(m[py * 5 + px], 1.0);
    }

    #[test]
    fn empty_mask_gives_no_prompt() {
        let m = vec![0.0f32; 16];
        assert!(derive_prompt(&m, 4, 4, PromptPolicy::CentroidPoint).is_none());
        assert!(derive_prompt(&m, 4, 4, PromptPolicy::BoundingBox).is_none());
    }

    #[test]
    fn bounding_box_is_tight() {
        let mut m = vec![0.0f64; 36];
        m[6 + 2] = 1.0;
        m[4 * 6 + 3] = 1.0;
        let p = derive_prompt(&m, 6, 6, PromptPolicy::BoundingBox).unwrap();
        assert_eq!(
            p.0[0],
            Prompt::Box {
                x0: 2.0,
                y0: 1.0,
                x1: 4.0,
                y1: 5.0
            }
        );
    }

    #[test]
    fn rasterize_rejects_empty_and_foreign_prompts() {
        let types = [PromptType::Point];
        let e = rasterize::<f64>(&[PromptSet::default()], &types, [8, 8], [4, 4]).unwrap_err();
        assert!(matches!(e, Error::Prompt(_)));
        let bx = PromptSet::single(Prompt::Box {
            x0: 0.0,
            y0: 0.0,
            x1: 2.0,
            y1: 2.0,
        });
        assert!(matches!(
            rasterize::<f64>(&[bx], &types, [8, 8], [4, 4]),
            Err(Error::Prompt(_))
        ));
    }

    #[test]
    fn point_peak_lands_on_its_cell() {
        let p = PromptSet::single(Prompt::Point { x: 5.0, y: 3.0 });
        let t = rasterize::<f64>(&[p], &[PromptType::Point], [8, 8], [4, 4]).unwrap();
        // (5,3) in image px → cell (2,1) centre at (5,3)
        assert_eq!(t.at4(0, 0, 1, 2), 1.0);
    }
}
