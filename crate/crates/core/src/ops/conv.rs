//! Stride-1 2-D convolution with zero padding, lowered to GEMM.
//!
//! The forward pass is tiled over output rows so the unfolded patch matrix
//! stays bounded (large images would otherwise need gigabytes). The input
//! gradient is itself a convolution of the upstream gradient with the
//! spatially flipped, channel-transposed kernel; the kernel gradient is a
//! GEMM against the same unfolded patches. Every reduction runs in a fixed
//! order, so results do not depend on thread scheduling.

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Shape, Tensor};

/// Upper bound on the unfolded patch buffer, in elements.
const PATCH_BUDGET: usize = 1 << 20;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    x: Shape,
    co: usize,
    cig: usize,
    cog: usize,
    k: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: Shape, w: Shape, pad: usize, groups: usize) -> Result<Self> {
        ensure!(groups >= 1, "conv2d groups must be at least 1");
        ensure!(w.h == w.w, "conv2d kernel must be square, got {}x{}", w.h, w.w);
        let k = w.h;
        ensure!(k % 2 == 1, "conv2d kernel size must be odd, got {k}");
        ensure!(
            x.c == w.c * groups,
            "conv2d input has {} channels, kernel expects {} x {groups} groups",
            x.c,
            w.c
        );
        ensure!(
            w.n.is_multiple_of(groups),
            "conv2d: {} output channels not divisible by {groups} groups",
            w.n
        );
        ensure!(pad < k, "conv2d padding {pad} must be smaller than kernel size {k}");
        ensure!(
            x.h + 2 * pad >= k && x.w + 2 * pad >= k,
            "conv2d kernel {k} larger than padded input {}x{}",
            x.h + 2 * pad,
            x.w + 2 * pad
        );
        Ok(Geometry {
            x,
            co: w.n,
            cig: w.c,
            cog: w.n / groups,
            k,
            pad,
            groups,
            ho: x.h + 2 * pad + 1 - k,
            wo: x.w + 2 * pad + 1 - k,
        })
    }

    fn out_shape(&self) -> Shape {
        Shape::new(self.x.n, self.co, self.ho, self.wo)
    }

    fn patch_rows(&self) -> usize {
        self.cig * self.k * self.k
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    fn tile_rows(&self) -> usize {
        (PATCH_BUDGET / (self.patch_rows() * self.wo).max(1)).clamp(1, self.ho)
    }
}

/// Unfold input rows `[y0, y0 + rows)` of one group of one image into a
/// `(cig·k·k) × (rows·wo)` patch matrix.
fn unfold<T: Scalar>(x: &Tensor<T>, geo: &Geometry, n: usize, group: usize, y0: usize, rows: usize, cols: &mut Vec<T>) {
    let (k, pad, wo) = (geo.k, geo.pad, geo.wo);
    let (h, w) = (geo.x.h, geo.x.w);
    let width = rows * wo;
    cols.clear();
    cols.resize(geo.patch_rows() * width, T::zero());
    for ci in 0..geo.cig {
        let plane = x.plane(n, group * geo.cig + ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * width..][..width];
                // valid output columns: 0 <= ox + kx - pad < w
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(wo);
                for r in 0..rows {
                    let sy = (y0 + r + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[r * wo..][..wo];
                    let s0 = x_lo + kx - pad;
                    dst[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, geo: &Geometry) -> Tensor<T> {
    let mut out = Tensor::zeros(geo.out_shape());
    let plane_out = geo.ho * geo.wo;
    let plane_in = geo.x.plane();
    let kk = geo.patch_rows();
    let mut cols = Vec::new();
    for n in 0..geo.x.n {
        for group in 0..geo.groups {
            let wg = &w.data()[group * geo.cog * kk..];
            let base = (n * geo.co + group * geo.cog) * plane_out;
            if geo.pointwise() {
                let xg = &x.data()[(n * geo.x.c + group * geo.cig) * plane_in..];
                T::gemm(
                    geo.cog,
                    geo.cig,
                    plane_in,
                    T::one(),
                    (wg, kk as isize, 1),
                    (xg, plane_in as isize, 1),
                    T::zero(),
                    (&mut out.data_mut()[base..], plane_out as isize, 1),
                );
                continue;
            }
            let tile = geo.tile_rows();
            let mut y0 = 0;
            while y0 < geo.ho {
                let rows = tile.min(geo.ho - y0);
                unfold(x, geo, n, group, y0, rows, &mut cols);
                T::gemm(
                    geo.cog,
                    kk,
                    rows * geo.wo,
                    T::one(),
                    (wg, kk as isize, 1),
                    (&cols, (rows * geo.wo) as isize, 1),
                    T::zero(),
                    (&mut out.data_mut()[base + y0 * geo.wo..], plane_out as isize, 1),
                );
                y0 += rows;
            }
        }
    }
    if let Some(b) = bias {
        for (i, chunk) in out.data_mut().chunks_exact_mut(plane_out).enumerate() {
            let v = b.data()[i % geo.co];
            chunk.iter_mut().for_each(|o| *o = *o + v);
        }
    }
    out
}

/// Kernel for the input gradient: `w'[g·cig + i, o, a, b] = w[g·cog + o, i, k−1−a, k−1−b]`.
fn flipped_transpose<T: Scalar>(w: &Tensor<T>, geo: &Geometry) -> Tensor<T> {
    let k = geo.k;
    Tensor::from_fn([geo.cig * geo.groups, geo.cog, k, k], |ci, o, a, b| {
        let group = ci / geo.cig;
        w.at(group * geo.cog + o, ci % geo.cig, k - 1 - a, k - 1 - b)
    })
}

fn weight_grad<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, geo: &Geometry) -> Tensor<T> {
    let kk = geo.patch_rows();
    let mut dw = Tensor::zeros([geo.co, geo.cig, geo.k, geo.k]);
    let plane_out = geo.ho * geo.wo;
    let plane_in = geo.x.plane();
    let mut cols = Vec::new();
    for n in 0..geo.x.n {
        for group in 0..geo.groups {
            let gbase = (n * geo.co + group * geo.cog) * plane_out;
            let dwg = &mut dw.data_mut()[group * geo.cog * kk..];
            if geo.pointwise() {
                let xg = &x.data()[(n * geo.x.c + group * geo.cig) * plane_in..];
                T::gemm(
                    geo.cog,
                    plane_in,
                    geo.cig,
                    T::one(),
                    (&g.data()[gbase..], plane_out as isize, 1),
                    (xg, 1, plane_in as isize),
                    T::one(),
                    (dwg, kk as isize, 1),
                );
                continue;
            }
            let tile = geo.tile_rows();
            let mut y0 = 0;
            while y0 < geo.ho {
                let rows = tile.min(geo.ho - y0);
                let width = rows * geo.wo;
                unfold(x, geo, n, group, y0, rows, &mut cols);
                T::gemm(
                    geo.cog,
                    width,
                    kk,
                    T::one(),
                    (&g.data()[gbase + y0 * geo.wo..], plane_out as isize, 1),
                    (&cols, 1, width as isize),
                    T::one(),
                    (dwg, kk as isize, 1),
                );
                y0 += rows;
            }
        }
    }
    dw
}

/// Plain convolution on tensors, outside any graph.
pub fn conv2d_tensor<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let geo = Geometry::new(x.shape(), weight.shape(), padding, groups)?;
    if let Some(b) = bias {
        ensure!(
            b.numel() == geo.co,
            "conv2d bias has {} entries for {} outputs",
            b.numel(),
            geo.co
        );
    }
    Ok(forward(x, weight, bias, &geo))
}

impl<T: Scalar> Graph<T> {
    /// 2-D convolution, stride 1, zero padding. `weight` is `(co, ci/groups, k, k)`
    /// with odd `k`; `bias` holds `co` values (any shape with that many elements).
    pub fn conv2d(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        padding: usize,
        groups: usize,
    ) -> Result<Var<T>> {
        let geo = Geometry::new(x.shape(), weight.shape(), padding, groups)?;
        if let Some(b) = bias {
            ensure!(
                b.value().numel() == geo.co,
                "conv2d bias has {} entries for {} outputs",
                b.value().numel(),
                geo.co
            );
        }
        let out = forward(x.value(), weight.value(), bias.map(|b| b.value()), &geo);
        let (xv, wv) = (x.value_rc(), weight.value_rc());
        let bias_shape = bias.map(|b| b.shape());
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(out, &inputs, move |g, needs| {
            let dx = needs[0].then(|| {
                let wt = flipped_transpose(&wv, &geo);
                let back = Geometry::new(g.shape(), wt.shape(), geo.k - 1 - geo.pad, geo.groups)
                    .expect("transposed convolution geometry");
                forward(g, &wt, None, &back)
            });
            let dw = needs[1].then(|| weight_grad(&xv, g, &geo));
            let mut grads = vec![dx, dw];
            if let Some(shape) = bias_shape {
                grads.push(needs[2].then(|| {
                    let plane = geo.ho * geo.wo;
                    let mut db = vec![T::zero(); geo.co];
                    for (i, chunk) in g.data().chunks_exact(plane).enumerate() {
                        db[i % geo.co] = db[i % geo.co] + chunk.iter().copied().sum::<T>();
                    }
                    Tensor::from_vec(shape, db).expect("bias gradient shape")
                }));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops, straight from the definition.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], pad: usize, groups: usize) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let k = ws.h;
        let (ho, wo) = (xs.h + 2 * pad + 1 - k, xs.w + 2 * pad + 1 - k);
        let cog = ws.n / groups;
        Tensor::from_fn([xs.n, ws.n, ho, wo], |n, o, y, xx| {
            let group = o / cog;
            let mut acc = b[o];
            for i in 0..ws.c {
                for a in 0..k {
                    for bb in 0..k {
                        let sy = (y + a) as isize - pad as isize;
                        let sx = (xx + bb) as isize - pad as isize;
                        if sy >= 0 && sx >= 0 && (sy as usize) < xs.h && (sx as usize) < xs.w {
                            acc += w.at(o, i, a, bb) * x.at(n, group * ws.c + i, sy as usize, sx as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::zeros([1, 1, 3, 3]);
        let w = Tensor::uniform([1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let y = conv2d_tensor(&x, &w, Some(&Tensor::zeros([1, 1, 1, 1])), 1, 1).unwrap();
        assert_eq!(y, Tensor::zeros([1, 1, 3, 3]));
    }

    #[test]
    fn scalar_kernel() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d_tensor(&x, &w, None, 0, 1).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::uniform([1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform([4, 3, 3, 3], -1.0, 1.0, &mut rng);
        let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bt = Tensor::from_vec([1, 4, 1, 1], b.clone()).unwrap();
        let got = conv2d_tensor(&x, &w, Some(&bt), 1, 1).unwrap();
        assert!(got.max_abs_diff(&naive(&x, &w, &b, 1, 1)) < 1e-12);
    }

    #[test]
    fn grouped_and_valid_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::uniform([2, 4, 7, 9], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform([6, 2, 5, 5], -1.0, 1.0, &mut rng);
        let b = vec![0.0; 6];
        for pad in [0, 1, 2, 4] {
            let got = conv2d_tensor(&x, &w, None, pad, 2).unwrap();
            assert!(got.max_abs_diff(&naive(&x, &w, &b, pad, 2)) < 1e-12, "pad {pad}");
        }
    }

    #[test]
    fn tiling_covers_every_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // 96 channels x 9 taps x 600 columns forces multi-row tiles with a ragged tail.
        let x = Tensor::<f64>::uniform([1, 96, 23, 600], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform([2, 96, 3, 3], -1.0, 1.0, &mut rng);
        let geo = Geometry::new(x.shape(), w.shape(), 1, 1).unwrap();
        assert!(geo.tile_rows() < geo.ho);
        let got = conv2d_tensor(&x, &w, None, 1, 1).unwrap();
        assert!(got.max_abs_diff(&naive(&x, &w, &[0.0; 2], 1, 1)) < 1e-10);
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = Tensor::<f32>::zeros([1, 3, 8, 8]);
        assert!(conv2d_tensor(&x, &Tensor::zeros([4, 3, 2, 2]), None, 0, 1).is_err());
        assert!(conv2d_tensor(&x, &Tensor::zeros([4, 2, 3, 3]), None, 1, 1).is_err());
        assert!(conv2d_tensor(&x, &Tensor::zeros([4, 3, 3, 3]), None, 3, 1).is_err());
        assert!(conv2d_tensor(
            &x,
            &Tensor::zeros([4, 3, 3, 3]),
            Some(&Tensor::zeros([1, 3, 1, 1])),
            1,
            1
        )
        .is_err());
    }
}
