use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Copy channels `[src_start, src_start + len)` of `src` into channels
/// `[dst_start, ..)` of `dst`. Both must share `n`, `h`, `w`.
fn copy_channels<T: Scalar>(src: &Tensor<T>, src_start: usize, dst: &mut Tensor<T>, dst_start: usize, len: usize) {
    let (ss, ds) = (src.shape(), dst.shape());
    let p = ss.plane();
    for n in 0..ss.n {
        let from = (n * ss.c + src_start) * p;
        let to = (n * ds.c + dst_start) * p;
        dst.data_mut()[to..to + len * p].copy_from_slice(&src.data()[from..from + len * p]);
    }
}

impl<T: Scalar> Graph<T> {
    /// Concatenate along the channel axis, preserving order.
    pub fn concat_channels(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        ensure!(!parts.is_empty(), "concat_channels of an empty list");
        let first = parts[0].shape();
        let mut total = 0;
        for part in parts {
            let s = part.shape();
            ensure!(
                s.n == first.n && s.h == first.h && s.w == first.w,
                "concat_channels: shape {s} does not match {first} outside the channel axis"
            );
            total += s.c;
        }
        let mut out = Tensor::zeros([first.n, total, first.h, first.w]);
        let mut offsets = Vec::with_capacity(parts.len());
        let mut at = 0;
        for part in parts {
            copy_channels(part.value(), 0, &mut out, at, part.shape().c);
            offsets.push((at, part.shape()));
            at += part.shape().c;
        }
        Ok(self.record(out, parts, move |g, needs| {
            offsets
                .iter()
                .zip(needs)
                .map(|(&(start, shape), &need)| {
                    need.then(|| {
                        let mut dx = Tensor::zeros(shape);
                        copy_channels(g, start, &mut dx, 0, shape.c);
                        dx
                    })
                })
                .collect()
        }))
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let s = x.shape();
        ensure!(
            len > 0 && start + len <= s.c,
            "channel slice [{start}, {}) out of range for {s}",
            start + len
        );
        let mut out = Tensor::zeros([s.n, len, s.h, s.w]);
        copy_channels(x.value(), start, &mut out, 0, len);
        Ok(self.record(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(s);
            copy_channels(g, 0, &mut dx, start, len);
            vec![Some(dx)]
        }))
    }

    /// Split along channels into consecutive pieces of the given sizes.
    pub fn split_channels(&self, x: &Var<T>, sizes: &[usize]) -> Result<Vec<Var<T>>> {
        let total: usize = sizes.iter().sum();
        ensure!(
            total == x.shape().c,
            "split sizes {sizes:?} do not sum to {} channels",
            x.shape().c
        );
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let part = self.slice_channels(x, start, len);
                start += len;
                part
            })
            .collect()
    }

    /// Softmax across `branches` groups of channels: channel `j` of branch `l`
    /// lives at index `l·c + j`, and the `branches` values sharing `(n, j, y, x)`
    /// are normalized to sum to one.
    pub fn softmax_over_branches(&self, logits: &Var<T>, branches: usize) -> Result<Var<T>> {
        let s = logits.shape();
        ensure!(
            branches >= 1 && s.c.is_multiple_of(branches),
            "{} channels do not divide into {branches} branches",
            s.c
        );
        let c = s.c / branches;
        let p = s.plane();
        let idx = move |n: usize, l: usize, j: usize, i: usize| ((n * s.c + l * c + j) * p) + i;
        let mut out = Tensor::zeros(s);
        {
            let src = logits.value().data();
            let dst = out.data_mut();
            for n in 0..s.n {
                for j in 0..c {
                    for i in 0..p {
                        let max = (0..branches)
                            .map(|l| src[idx(n, l, j, i)])
                            .fold(T::neg_infinity(), T::max);
                        let mut total = T::zero();
                        for l in 0..branches {
                            let e = (src[idx(n, l, j, i)] - max).exp();
                            dst[idx(n, l, j, i)] = e;
                            total = total + e;
                        }
                        for l in 0..branches {
                            dst[idx(n, l, j, i)] = dst[idx(n, l, j, i)] / total;
                        }
                    }
                }
            }
        }
        let saved = out.clone();
        Ok(self.record(out, &[logits], move |g, _| {
            let mut dx = Tensor::zeros(s);
            let (sd, gd) = (saved.data(), g.data());
            for n in 0..s.n {
                for j in 0..c {
                    for i in 0..p {
                        let dot = (0..branches)
                            .map(|l| sd[idx(n, l, j, i)] * gd[idx(n, l, j, i)])
                            .fold(T::zero(), |a, b| a + b);
                        for l in 0..branches {
                            let k = idx(n, l, j, i);
                            dx.data_mut()[k] = sd[k] * (gd[k] - dot);
                        }
                    }
                }
            }
            vec![Some(dx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn concat_then_split_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng));
        let b = g.constant(Tensor::uniform([1, 3, 4, 4], -1.0, 1.0, &mut rng));
        let cat = g.concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(1, 5, 4, 4));
        let parts = g.split_channels(&cat, &[2, 3]).unwrap();
        assert_eq!(parts[0].value(), a.value());
        assert_eq!(parts[1].value(), b.value());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let b = g.constant(Tensor::zeros([1, 2, 4, 5]));
        assert!(g.concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn split_rejects_bad_sizes() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([1, 4, 2, 2]));
        assert!(g.split_channels(&a, &[1, 2]).is_err());
    }

    #[test]
    fn softmax_equal_logits_are_uniform() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([2, 6, 1, 1], 0.3));
        let w = g.softmax_over_branches(&x, 2).unwrap();
        assert!(w.value().data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn softmax_closed_form() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec([1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap());
        let w = g.softmax_over_branches(&x, 2).unwrap();
        assert!((w.value().data()[0] - 0.25).abs() < 1e-12);
        assert!((w.value().data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_indivisible() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 5, 1, 1]));
        assert!(g.softmax_over_branches(&x, 2).is_err());
    }
}
