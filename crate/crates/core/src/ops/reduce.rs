use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

impl<T: Scalar> Graph<T> {
    /// Sum of all elements, shape `(1, 1, 1, 1)`.
    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let s = x.shape();
        let out = Tensor::full([1, 1, 1, 1], x.value().sum());
        self.record(out, &[x], move |g, _| vec![Some(Tensor::full(s, g.data()[0]))])
    }

    /// Mean of all elements, shape `(1, 1, 1, 1)`.
    pub fn mean(&self, x: &Var<T>) -> Var<T> {
        let s = x.shape();
        let count = T::from_usize(s.numel()).expect("element count");
        let out = Tensor::full([1, 1, 1, 1], x.value().sum() / count);
        self.record(out, &[x], move |g, _| vec![Some(Tensor::full(s, g.data()[0] / count))])
    }

    /// Spatial mean per `(n, c)`, shape `(n, c, 1, 1)`.
    pub fn global_avg_pool(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        ensure!(s.numel() > 0, "global_avg_pool of an empty tensor {s}");
        let area = T::from_usize(s.plane()).expect("plane size");
        let mut out = Tensor::zeros([s.n, s.c, 1, 1]);
        for (i, chunk) in x.value().data().chunks_exact(s.plane()).enumerate() {
            out.data_mut()[i] = chunk.iter().copied().sum::<T>() / area;
        }
        Ok(self.record(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(s);
            for (i, chunk) in dx.data_mut().chunks_exact_mut(s.plane()).enumerate() {
                chunk.fill(g.data()[i] / area);
            }
            vec![Some(dx)]
        }))
    }

    /// Per-position mean over channels, shape `(n, 1, h, w)`.
    pub fn channel_mean(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        ensure!(s.c > 0, "channel_mean over zero channels");
        let inv = T::one() / T::from_usize(s.c).expect("channel count");
        let p = s.plane();
        let mut out = Tensor::zeros([s.n, 1, s.h, s.w]);
        for n in 0..s.n {
            let dst = &mut out.data_mut()[n * p..(n + 1) * p];
            for c in 0..s.c {
                for (d, &v) in dst.iter_mut().zip(x.value().plane(n, c)) {
                    *d = *d + v;
                }
            }
            dst.iter_mut().for_each(|d| *d = *d * inv);
        }
        Ok(self.record(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(s);
            for n in 0..s.n {
                let src = &g.data()[n * p..(n + 1) * p];
                for c in 0..s.c {
                    let start = (n * s.c + c) * p;
                    for (d, &v) in dx.data_mut()[start..start + p].iter_mut().zip(src) {
                        *d = v * inv;
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Per-position maximum over channels, shape `(n, 1, h, w)`. The gradient
    /// goes to the first maximal channel.
    pub fn channel_max(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        ensure!(s.c > 0, "channel_max over zero channels");
        let p = s.plane();
        let mut out = Tensor::zeros([s.n, 1, s.h, s.w]);
        let mut argmax = vec![0usize; s.n * p];
        for n in 0..s.n {
            let dst = &mut out.data_mut()[n * p..(n + 1) * p];
            dst.copy_from_slice(x.value().plane(n, 0));
            for c in 1..s.c {
                for (i, &v) in x.value().plane(n, c).iter().enumerate() {
                    if v > dst[i] {
                        dst[i] = v;
                        argmax[n * p + i] = c;
                    }
                }
            }
        }
        Ok(self.record(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(s);
            for n in 0..s.n {
                for i in 0..p {
                    let c = argmax[n * p + i];
                    dx.data_mut()[(n * s.c + c) * p + i] = g.data()[n * p + i];
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

    #[test]
    fn pool_of_constant() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([2, 3, 4, 5], 1.75));
        let p = g.global_avg_pool(&x).unwrap();
        assert_eq!(p.shape(), Shape::new(2, 3, 1, 1));
        assert!(p.value().data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn pool_mean() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(g.global_avg_pool(&x).unwrap().value().data(), &[2.5]);
    }

    #[test]
    fn pool_gradient_is_uniform() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([1, 2, 3, 4], |_, c, y, x| (c + y * x) as f64));
        let p = g.global_avg_pool(&x).unwrap();
        let loss = g.sum(&p);
        let grads = g.backward(&loss).unwrap();
        assert!(grads
            .get(&x)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn channel_reductions_agree_on_constant_channels() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 4, 3, 3], |_, _, y, x| (y * 3 + x) as f64));
        let m = g.channel_mean(&x).unwrap();
        let mx = g.channel_max(&x).unwrap();
        assert_eq!(m.shape(), Shape::new(1, 1, 3, 3));
        assert_eq!(m.value(), mx.value());
        assert_eq!(m.value().at(0, 0, 2, 1), 7.0);
    }
}
