//! Raw numeric kernels on row-major slices: matrix products, convolution
//! lowering, pooling, resampling and batch normalization.
//!
//! Every kernel that runs in parallel partitions its *output* so each element
//! is produced by exactly one task in a fixed summation order. Results are
//! therefore bit-identical for any thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

const PAR_MIN_WORK: usize = 1 << 14;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_ab<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub fn gemm_atb<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, c_row): (usize, &mut [T])| {
        for p in 0..k {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m×n] += a · bᵀ` where `a` is `m×k` and `b` is stored `n×k`.
pub fn gemm_abt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *cv += acc;
        }
    };
    if m * k * n >= PAR_MIN_WORK && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Geometry of a 2-D sliding window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kh: kernel,
            kw: kernel,
            stride,
            pad,
        }
    }

    /// Output extent of a convolution over an input of extent `len`.
    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        if padded < k || self.stride == 0 {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.out_len(h, self.kh)?, self.out_len(w, self.kw)?))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Lowers one `C×H×W` image into a `(C·kh·kw) × (Ho·Wo)` column matrix.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize) -> Vec<T> {
    let p = ho * wo;
    let mut col = vec![T::zero(); c * win.kh * win.kw * p];
    for ci in 0..c {
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let r = (ci * win.kh + ky) * win.kw + kx;
                let dst = &mut col[r * p..(r + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize, x: &mut [T]) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let r = (ci * win.kh + ky) * win.kw + kx;
                let src = &col[r * p..(r + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Shapes of a convolution call.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub ho: usize,
    pub wo: usize,
    pub win: Window,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.c_in * self.win.kh * self.win.kw
    }
}

pub fn conv2d_forward<T: Scalar>(d: ConvDims, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (in_per, out_per, p, k) = (d.c_in * d.h * d.w, d.c_out * d.ho * d.wo, d.ho * d.wo, d.k());
    let mut out = vec![T::zero(); d.batch * out_per];
    out.par_chunks_mut(out_per).enumerate().for_each(|(b, ob)| {
        let xb = &x[b * in_per..(b + 1) * in_per];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(p).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        if d.win.is_pointwise() {
            gemm_ab(d.c_out, k, p, weight, xb, ob);
        } else {
            let col = im2col(xb, d.c_in, d.h, d.w, d.win, d.ho, d.wo);
            gemm_ab(d.c_out, k, p, weight, &col, ob);
        }
    });
    out
}

/// Returns `(d_input, d_weight, d_bias)`; `d_input` is skipped when `need_input` is false.
pub fn conv2d_backward<T: Scalar>(
    d: ConvDims,
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (in_per, out_per, p, k) = (d.c_in * d.h * d.w, d.c_out * d.ho * d.wo, d.ho * d.wo, d.k());
    let per_batch: Vec<(Option<Vec<T>>, Vec<T>)> = (0..d.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * in_per..(b + 1) * in_per];
            let gb = &grad_out[b * out_per..(b + 1) * out_per];
            let col_owned;
            let col: &[T] = if d.win.is_pointwise() {
                xb
            } else {
                col_owned = im2col(xb, d.c_in, d.h, d.w, d.win, d.ho, d.wo);
                &col_owned
            };
            let mut dw = vec![T::zero(); d.c_out * k];
            gemm_abt(d.c_out, p, k, gb, col, &mut dw);
            let dx = need_input.then(|| {
                let mut dcol = vec![T::zero(); k * p];
                gemm_atb(k, d.c_out, p, weight, gb, &mut dcol);
                if d.win.is_pointwise() {
                    dcol
                } else {
                    let mut dx = vec![T::zero(); in_per];
                    col2im(&dcol, d.c_in, d.h, d.w, d.win, d.ho, d.wo, &mut dx);
                    dx
                }
            });
            (dx, dw)
        })
        .collect();
    let mut dweight = vec![T::zero(); d.c_out * k];
    let mut dinput = need_input.then(|| Vec::with_capacity(d.batch * in_per));
    for (dx, dw) in per_batch {
        for (a, b) in dweight.iter_mut().zip(dw) {
            *a += b;
        }
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend(dx);
        }
    }
    let mut dbias = vec![T::zero(); d.c_out];
    for b in 0..d.batch {
        for (co, db) in dbias.iter_mut().enumerate() {
            let start = b * out_per + co * p;
            *db += grad_out[start..start + p].iter().copied().sum::<T>();
        }
    }
    (dinput, dweight, dbias)
}

/// Transposed convolution. `weight` is laid out `c_in × c_out × kh × kw`;
/// `d.h, d.w` is the input extent and `d.ho, d.wo` the (larger) output extent.
pub fn conv_transpose2d_forward<T: Scalar>(d: ConvDims, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let kk = d.c_out * d.win.kh * d.win.kw;
    let (in_per, out_per, p) = (d.c_in * d.h * d.w, d.c_out * d.ho * d.wo, d.h * d.w);
    let mut out = vec![T::zero(); d.batch * out_per];
    out.par_chunks_mut(out_per).enumerate().for_each(|(b, ob)| {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let mut col = vec![T::zero(); kk * p];
        gemm_atb(kk, d.c_in, p, weight, xb, &mut col);
        col2im(&col, d.c_out, d.ho, d.wo, d.win, d.h, d.w, ob);
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(d.ho * d.wo).enumerate() {
                for v in chunk {
                    *v += bias[co];
                }
            }
        }
    });
    out
}

pub fn conv_transpose2d_backward<T: Scalar>(
    d: ConvDims,
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let kk = d.c_out * d.win.kh * d.win.kw;
    let (in_per, out_per, p) = (d.c_in * d.h * d.w, d.c_out * d.ho * d.wo, d.h * d.w);
    let per_batch: Vec<(Option<Vec<T>>, Vec<T>)> = (0..d.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * in_per..(b + 1) * in_per];
            let gb = &grad_out[b * out_per..(b + 1) * out_per];
            let gcol = im2col(gb, d.c_out, d.ho, d.wo, d.win, d.h, d.w);
            let mut dw = vec![T::zero(); d.c_in * kk];
            gemm_abt(d.c_in, p, kk, xb, &gcol, &mut dw);
            let dx = need_input.then(|| {
                let mut dx = vec![T::zero(); in_per];
                gemm_ab(d.c_in, kk, p, weight, &gcol, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();
    let mut dweight = vec![T::zero(); d.c_in * kk];
    let mut dinput = need_input.then(|| Vec::with_capacity(d.batch * in_per));
    for (dx, dw) in per_batch {
        for (a, b) in dweight.iter_mut().zip(dw) {
            *a += b;
        }
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend(dx);
        }
    }
    let mut dbias = vec![T::zero(); d.c_out];
    let q = d.ho * d.wo;
    for b in 0..d.batch {
        for (co, db) in dbias.iter_mut().enumerate() {
            let start = b * out_per + co * q;
            *db += grad_out[start..start + q].iter().copied().sum::<T>();
        }
    }
    (dinput, dweight, dbias)
}

/// Max pooling over `planes` independent `h×w` planes. Returns the output and
/// the flat source index chosen for each output element.
pub fn max_pool2d<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    win: Window,
    ho: usize,
    wo: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut out = vec![T::zero(); planes * ho * wo];
    let mut arg = vec![0usize; planes * ho * wo];
    for pl in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ky in 0..win.kh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..win.kw {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = (pl * h + iy as usize) * w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (pl * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    (out, arg)
}

/// Non-overlapping average pooling with square window `k` (trailing rows/cols dropped).
pub fn avg_pool2d<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h / k, w / k);
    let scale = T::one() / T::of((k * k) as f64);
    let mut out = vec![T::zero(); planes * ho * wo];
    for pl in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for ky in 0..k {
                    for kx in 0..k {
                        acc += x[(pl * h + oy * k + ky) * w + ox * k + kx];
                    }
                }
                out[(pl * ho + oy) * wo + ox] = acc * scale;
            }
        }
    }
    out
}

pub fn avg_pool2d_backward<T: Scalar>(grad_out: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h / k, w / k);
    let scale = T::one() / T::of((k * k) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = grad_out[(pl * ho + oy) * wo + ox] * scale;
                for ky in 0..k {
                    for kx in 0..k {
                        dx[(pl * h + oy * k + ky) * w + ox * k + kx] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour source index for output position `dst`.
#[inline]
pub fn nearest_src(dst: usize, in_len: usize, out_len: usize) -> usize {
    (dst * in_len / out_len).min(in_len - 1)
}

pub fn upsample_nearest<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * ho * wo];
    for pl in 0..planes {
        for oy in 0..ho {
            let sy = nearest_src(oy, h, ho);
            for ox in 0..wo {
                out[(pl * ho + oy) * wo + ox] = x[(pl * h + sy) * w + nearest_src(ox, w, wo)];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        for oy in 0..ho {
            let sy = nearest_src(oy, h, ho);
            for ox in 0..wo {
                dx[(pl * h + sy) * w + nearest_src(ox, w, wo)] += grad_out[(pl * ho + oy) * wo + ox];
            }
        }
    }
    dx
}

/// Half-pixel-centred linear interpolation taps (`align_corners = false`).
/// Returns `(i0, i1, weight_of_i1)` per output position.
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
    let ty = linear_taps(h, ho);
    let tx = linear_taps(w, wo);
    let mut out = vec![T::zero(); planes * ho * wo];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                // lerp form keeps constant regions exact
                let (a, b) = (src[y0 * w + x0], src[y0 * w + x1]);
                let top = a + (b - a) * lx;
                let (c, d) = (src[y1 * w + x0], src[y1 * w + x1]);
                let bot = c + (d - c) * lx;
                out[(pl * ho + oy) * wo + ox] = top + (bot - top) * ly;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let ty = linear_taps(h, ho);
    let tx = linear_taps(w, wo);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly1, ly0) = (T::of(ly), T::of(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx1, lx0) = (T::of(lx), T::of(1.0 - lx));
                let g = grad_out[(pl * ho + oy) * wo + ox];
                dst[y0 * w + x0] += g * ly0 * lx0;
                dst[y0 * w + x1] += g * ly0 * lx1;
                dst[y1 * w + x0] += g * ly1 * lx0;
                dst[y1 * w + x1] += g * ly1 * lx1;
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over `(batch, h, w)`.
pub fn channel_moments<T: Scalar>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let n = T::of((b * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for bi in 0..b {
            let s = (bi * c + ch) * hw;
            acc += x[s..s + hw].iter().copied().sum::<T>();
        }
        let m = acc / n;
        let mut sq = T::zero();
        for bi in 0..b {
            let s = (bi * c + ch) * hw;
            for &v in &x[s..s + hw] {
                sq += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = sq / n;
    }
    (mean, var)
}
