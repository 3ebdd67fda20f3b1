//! Spatial resampling and wavelet primitives.
//!
//! The Haar transform is the orthonormal one: every 2×2 block
//! `[[a, b], [c, d]]` maps to
//!
//! ```text
//! LL = ( a + b + c + d) / 2
//! HL = (-a - b + c + d) / 2
//! LH = (-a + b - c + d) / 2
//! HH = ( a - b - c + d) / 2
//! ```
//!
//! Subbands are stored subband-major: for an input with `C` channels the
//! output channels `[0, C)` hold LL of every input channel, `[C, 2C)` HL,
//! `[2C, 3C)` LH and `[3C, 4C)` HH. The transform matrix is orthogonal and
//! symmetric up to the layout, so the inverse is also the adjoint, which is
//! what the backward passes use.

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Shape, Tensor};

/// Number of subbands produced by one level of the 2-D Haar transform.
pub const SUBBANDS: usize = 4;

pub fn dwt_haar<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    ensure!(
        s.h.is_multiple_of(2) && s.w.is_multiple_of(2),
        "dwt_haar needs even spatial dims, got {}x{}",
        s.h,
        s.w
    );
    let half = T::from_f64_lossy(0.5);
    let (h2, w2) = (s.h / 2, s.w / 2);
    let out_shape = Shape::new(s.n, SUBBANDS * s.c, h2, w2);
    let mut out = Tensor::zeros(out_shape);
    let band = s.c * h2 * w2;
    for n in 0..s.n {
        let dst = &mut out.data_mut()[n * SUBBANDS * band..][..SUBBANDS * band];
        for c in 0..s.c {
            let src = x.plane(n, c);
            let off = c * h2 * w2;
            for i in 0..h2 {
                let top = &src[2 * i * s.w..][..s.w];
                let bot = &src[(2 * i + 1) * s.w..][..s.w];
                for j in 0..w2 {
                    let (a, b) = (top[2 * j], top[2 * j + 1]);
                    let (c_, d) = (bot[2 * j], bot[2 * j + 1]);
                    let o = off + i * w2 + j;
                    dst[o] = (a + b + c_ + d) * half;
                    dst[band + o] = (c_ + d - a - b) * half;
                    dst[2 * band + o] = (b + d - a - c_) * half;
                    dst[3 * band + o] = (a + d - b - c_) * half;
                }
            }
        }
    }
    Ok(out)
}

pub fn iwt_haar<T: Scalar>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let s = y.shape();
    ensure!(
        s.c.is_multiple_of(SUBBANDS),
        "iwt_haar needs a channel count divisible by 4, got {}",
        s.c
    );
    let half = T::from_f64_lossy(0.5);
    let c_out = s.c / SUBBANDS;
    let (h, w) = (s.h * 2, s.w * 2);
    let mut out = Tensor::zeros([s.n, c_out, h, w]);
    let band = c_out * s.plane();
    for n in 0..s.n {
        let src = &y.data()[n * s.c * s.plane()..][..s.c * s.plane()];
        for c in 0..c_out {
            let off = c * s.plane();
            let start = (n * c_out + c) * h * w;
            let dst = &mut out.data_mut()[start..start + h * w];
            for i in 0..s.h {
                for j in 0..s.w {
                    let o = off + i * s.w + j;
                    let (ll, hl, lh, hh) = (src[o], src[band + o], src[2 * band + o], src[3 * band + o]);
                    dst[2 * i * w + 2 * j] = (ll - hl - lh + hh) * half;
                    dst[2 * i * w + 2 * j + 1] = (ll - hl + lh - hh) * half;
                    dst[(2 * i + 1) * w + 2 * j] = (ll + hl - lh - hh) * half;
                    dst[(2 * i + 1) * w + 2 * j + 1] = (ll + hl + lh + hh) * half;
                }
            }
        }
    }
    Ok(out)
}

/// Space-to-depth: `out[n, c·r² + dy·r + dx, y, x] = in[n, c, y·r + dy, x·r + dx]`.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    ensure!(r >= 1, "pixel_unshuffle factor must be positive");
    ensure!(
        s.h.is_multiple_of(r) && s.w.is_multiple_of(r),
        "pixel_unshuffle: {}x{} not divisible by {r}",
        s.h,
        s.w
    );
    let (ho, wo) = (s.h / r, s.w / r);
    Ok(Tensor::from_fn([s.n, s.c * r * r, ho, wo], |n, c, y, xx| {
        let (ci, sub) = (c / (r * r), c % (r * r));
        x.at(n, ci, y * r + sub / r, xx * r + sub % r)
    }))
}

/// Depth-to-space, the exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    ensure!(r >= 1, "pixel_shuffle factor must be positive");
    ensure!(
        s.c.is_multiple_of(r * r),
        "pixel_shuffle: {} channels not divisible by {}",
        s.c,
        r * r
    );
    Ok(Tensor::from_fn(
        [s.n, s.c / (r * r), s.h * r, s.w * r],
        |n, c, y, xx| x.at(n, c * r * r + (y % r) * r + xx % r, y / r, xx / r),
    ))
}

/// Interpolation taps along one axis: `(lower, upper, upper_weight)`.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    ensure!(out_h >= 1 && out_w >= 1, "bilinear_resize output must be non-empty");
    ensure!(s.h >= 1 && s.w >= 1, "bilinear_resize of an empty image");
    let ty = bilinear_taps(s.h, out_h);
    let tx = to_scalar_taps::<T>(&bilinear_taps(s.w, out_w));
    let mut out = Tensor::zeros([s.n, s.c, out_h, out_w]);
    let mut row = vec![T::zero(); out_w];
    for (p, dst) in out.data_mut().chunks_exact_mut(out_h * out_w).enumerate() {
        let src = &x.data()[p * s.plane()..][..s.plane()];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            let (r0, r1) = (&src[y0 * s.w..][..s.w], &src[y1 * s.w..][..s.w]);
            for (o, &(x0, x1, fx)) in row.iter_mut().zip(&tx) {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                *o = top + (bottom - top) * fy;
            }
            dst[oy * out_w..][..out_w].copy_from_slice(&row);
        }
    }
    Ok(out)
}

fn to_scalar_taps<T: Scalar>(taps: &[(usize, usize, f64)]) -> Vec<(usize, usize, T)> {
    taps.iter().map(|&(a, b, f)| (a, b, T::from_f64_lossy(f))).collect()
}

/// Adjoint of [`bilinear_resize`]: scatters `g` back onto an `in_h × in_w` grid.
fn bilinear_adjoint<T: Scalar>(g: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let s = g.shape();
    let ty = to_scalar_taps::<T>(&bilinear_taps(in_h, s.h));
    let tx = to_scalar_taps::<T>(&bilinear_taps(in_w, s.w));
    let mut dx = Tensor::zeros([s.n, s.c, in_h, in_w]);
    let one = T::one();
    for (p, dst) in dx.data_mut().chunks_exact_mut(in_h * in_w).enumerate() {
        let src = &g.data()[p * s.plane()..][..s.plane()];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = src[oy * s.w + ox];
                let (top, bottom) = (v * (one - fy), v * fy);
                dst[y0 * in_w + x0] = dst[y0 * in_w + x0] + top * (one - fx);
                dst[y0 * in_w + x1] = dst[y0 * in_w + x1] + top * fx;
                dst[y1 * in_w + x0] = dst[y1 * in_w + x0] + bottom * (one - fx);
                dst[y1 * in_w + x1] = dst[y1 * in_w + x1] + bottom * fx;
            }
        }
    }
    dx
}

/// Reflect padding on the bottom and right edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PadSpec {
    pub bottom: usize,
    pub right: usize,
}

impl PadSpec {
    pub fn new(bottom: usize, right: usize) -> Self {
        PadSpec { bottom, right }
    }

    /// Smallest padding that makes `h` and `w` multiples of `multiple`.
    pub fn to_multiple(h: usize, w: usize, multiple: usize) -> Self {
        let up = |v: usize| v.div_ceil(multiple) * multiple - v;
        PadSpec {
            bottom: up(h),
            right: up(w),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.bottom == 0 && self.right == 0
    }
}

/// Mirror index `j` of a padded axis back into `[0, len)` without repeating the edge.
#[inline]
fn reflect(j: usize, len: usize) -> usize {
    if j < len {
        j
    } else {
        2 * (len - 1) - j
    }
}

pub fn pad_reflect<T: Scalar>(x: &Tensor<T>, spec: PadSpec) -> Result<Tensor<T>> {
    let s = x.shape();
    ensure!(
        spec.bottom < s.h && spec.right < s.w,
        "reflect padding ({}, {}) must be smaller than the image {}x{}",
        spec.bottom,
        spec.right,
        s.h,
        s.w
    );
    if spec.is_identity() {
        return Ok(x.clone());
    }
    Ok(Tensor::from_fn(
        [s.n, s.c, s.h + spec.bottom, s.w + spec.right],
        |n, c, y, xx| x.at(n, c, reflect(y, s.h), reflect(xx, s.w)),
    ))
}

/// Remove `spec` rows and columns from the bottom and right.
pub fn crop<T: Scalar>(x: &Tensor<T>, spec: PadSpec) -> Result<Tensor<T>> {
    let s = x.shape();
    ensure!(
        spec.bottom < s.h && spec.right < s.w,
        "crop ({}, {}) would empty a {}x{} image",
        spec.bottom,
        spec.right,
        s.h,
        s.w
    );
    if spec.is_identity() {
        return Ok(x.clone());
    }
    Ok(Tensor::from_fn(
        [s.n, s.c, s.h - spec.bottom, s.w - spec.right],
        |n, c, y, xx| x.at(n, c, y, xx),
    ))
}

/// Zero-extend `x` by `spec` on the bottom and right; adjoint of [`crop`].
fn zero_extend<T: Scalar>(x: &Tensor<T>, spec: PadSpec) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros([s.n, s.c, s.h + spec.bottom, s.w + spec.right]);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    *out.at_mut(n, c, y, xx) = x.at(n, c, y, xx);
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad_reflect`]: folds mirrored gradients back onto their sources.
fn fold_reflect<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = g.shape();
    let mut out = Tensor::zeros([s.n, s.c, h, w]);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let dst = out.at_mut(n, c, reflect(y, h), reflect(xx, w));
                    *dst = *dst + g.at(n, c, y, xx);
                }
            }
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn dwt_haar(&self, x: &Var<T>) -> Result<Var<T>> {
        let out = dwt_haar(x.value())?;
        Ok(self.record(out, &[x], |g, _| vec![Some(iwt_haar(g).expect("dwt adjoint"))]))
    }

    pub fn iwt_haar(&self, y: &Var<T>) -> Result<Var<T>> {
        let out = iwt_haar(y.value())?;
        Ok(self.record(out, &[y], |g, _| vec![Some(dwt_haar(g).expect("iwt adjoint"))]))
    }

    pub fn pixel_unshuffle(&self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let out = pixel_unshuffle(x.value(), r)?;
        Ok(self.record(out, &[x], move |g, _| {
            vec![Some(pixel_shuffle(g, r).expect("unshuffle adjoint"))]
        }))
    }

    pub fn pixel_shuffle(&self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let out = pixel_shuffle(x.value(), r)?;
        Ok(self.record(out, &[x], move |g, _| {
            vec![Some(pixel_unshuffle(g, r).expect("shuffle adjoint"))]
        }))
    }

    /// Bilinear resize; returns `x` itself when the size is unchanged.
    pub fn bilinear_resize(&self, x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
        let s = x.shape();
        if (s.h, s.w) == (out_h, out_w) {
            return Ok(x.clone());
        }
        let out = bilinear_resize(x.value(), out_h, out_w)?;
        Ok(self.record(out, &[x], move |g, _| vec![Some(bilinear_adjoint(g, s.h, s.w))]))
    }

    pub fn pad_reflect(&self, x: &Var<T>, spec: PadSpec) -> Result<Var<T>> {
        if spec.is_identity() {
            return Ok(x.clone());
        }
        let s = x.shape();
        let out = pad_reflect(x.value(), spec)?;
        Ok(self.record(out, &[x], move |g, _| vec![Some(fold_reflect(g, s.h, s.w))]))
    }

    pub fn crop(&self, x: &Var<T>, spec: PadSpec) -> Result<Var<T>> {
        if spec.is_identity() {
            return Ok(x.clone());
        }
        let out = crop(x.value(), spec)?;
        Ok(self.record(out, &[x], move |g, _| vec![Some(zero_extend(g, spec))]))
    }
}
