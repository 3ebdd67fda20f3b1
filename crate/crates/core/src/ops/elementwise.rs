use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Shape, Tensor};

/// Strides into `y` while iterating over `x`'s shape; zero on broadcast axes.
fn broadcast_strides(x: Shape, y: Shape) -> Result<[usize; 4]> {
    let xd = x.dims();
    let yd = y.dims();
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for axis in (0..4).rev() {
        ensure!(
            yd[axis] == xd[axis] || yd[axis] == 1,
            "shape {y} does not broadcast over {x}"
        );
        strides[axis] = if yd[axis] == 1 { 0 } else { acc };
        acc *= yd[axis];
    }
    Ok(strides)
}

/// Visit `(x_index, y_index)` pairs in `x`'s row-major order.
fn for_each_pair(x: Shape, strides: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let mut xi = 0;
    for n in 0..x.n {
        for c in 0..x.c {
            for h in 0..x.h {
                let base = n * strides[0] + c * strides[1] + h * strides[2];
                for w in 0..x.w {
                    f(xi, base + w * strides[3]);
                    xi += 1;
                }
            }
        }
    }
}

/// Sum `g` (shaped like `x`) down to `y`'s broadcast shape.
fn reduce_to<T: Scalar>(g: &Tensor<T>, y: Shape, strides: [usize; 4]) -> Tensor<T> {
    let mut out = Tensor::zeros(y);
    let gd = g.data();
    let od = out.data_mut();
    for_each_pair(g.shape(), strides, |xi, yi| od[yi] = od[yi] + gd[xi]);
    out
}

fn binary<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, strides: [usize; 4], f: impl Fn(T, T) -> T) -> Tensor<T> {
    if x.shape() == y.shape() {
        return x.zip_map(y, f);
    }
    let mut out = Tensor::zeros(x.shape());
    let (xd, yd) = (x.data(), y.data());
    let od = out.data_mut();
    for_each_pair(x.shape(), strides, |xi, yi| od[xi] = f(xd[xi], yd[yi]));
    out
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn relu(&self, x: &Var<T>) -> Var<T> {
        let xv = x.value_rc();
        let out = xv.map(|v| if v > T::zero() { v } else { T::zero() });
        self.record(out, &[x], move |g, _| {
            vec![Some(g.zip_map(&xv, |g, v| if v > T::zero() { g } else { T::zero() }))]
        })
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(sigmoid);
        let saved = out.clone();
        self.record(out, &[x], move |g, _| {
            vec![Some(g.zip_map(&saved, |g, s| g * s * (T::one() - s)))]
        })
    }

    /// Parametric ReLU with one learnable slope per channel; `alpha` has shape `(1, c, 1, 1)`.
    pub fn prelu(&self, x: &Var<T>, alpha: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        ensure!(
            alpha.shape() == Shape::new(1, s.c, 1, 1),
            "prelu slope shape {} does not match {} channels",
            alpha.shape(),
            s.c
        );
        let xv = x.value_rc();
        let av = alpha.value_rc();
        let plane = s.plane();
        let mut out = Tensor::zeros(s);
        for (i, (o, &v)) in out.data_mut().iter_mut().zip(xv.data()).enumerate() {
            let a = av.data()[(i / plane) % s.c];
            *o = if v >= T::zero() { v } else { a * v };
        }
        Ok(self.record(out, &[x, alpha], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = Tensor::zeros(s);
                for (i, d) in dx.data_mut().iter_mut().enumerate() {
                    let v = xv.data()[i];
                    let a = av.data()[(i / plane) % s.c];
                    *d = if v >= T::zero() { g.data()[i] } else { a * g.data()[i] };
                }
                dx
            });
            let da = needs[1].then(|| {
                let mut da = Tensor::zeros(av.shape());
                for (i, &v) in xv.data().iter().enumerate() {
                    if v < T::zero() {
                        let c = (i / plane) % s.c;
                        da.data_mut()[c] = da.data()[c] + g.data()[i] * v;
                    }
                }
                da
            });
            vec![dx, da]
        }))
    }

    /// `x + y`, with `y` broadcast over singleton axes.
    pub fn add(&self, x: &Var<T>, y: &Var<T>) -> Result<Var<T>> {
        let strides = broadcast_strides(x.shape(), y.shape())?;
        let out = binary(x.value(), y.value(), strides, |a, b| a + b);
        let ys = y.shape();
        Ok(self.record(out, &[x, y], move |g, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| {
                    if g.shape() == ys {
                        g.clone()
                    } else {
                        reduce_to(g, ys, strides)
                    }
                }),
            ]
        }))
    }

    /// `x - y`, with `y` broadcast over singleton axes.
    pub fn sub(&self, x: &Var<T>, y: &Var<T>) -> Result<Var<T>> {
        let strides = broadcast_strides(x.shape(), y.shape())?;
        let out = binary(x.value(), y.value(), strides, |a, b| a - b);
        let ys = y.shape();
        Ok(self.record(out, &[x, y], move |g, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| reduce_to(g, ys, strides).map(|v| -v)),
            ]
        }))
    }

    /// `x ⊙ y`, with `y` broadcast over singleton axes.
    pub fn mul(&self, x: &Var<T>, y: &Var<T>) -> Result<Var<T>> {
        let strides = broadcast_strides(x.shape(), y.shape())?;
        let out = binary(x.value(), y.value(), strides, |a, b| a * b);
        let (xv, yv) = (x.value_rc(), y.value_rc());
        Ok(self.record(out, &[x, y], move |g, needs| {
            let dx = needs[0].then(|| binary(g, &yv, strides, |g, b| g * b));
            let dy = needs[1].then(|| {
                let gx = g.zip_map(&xv, |g, a| g * a);
                reduce_to(&gx, yv.shape(), strides)
            });
            vec![dx, dy]
        }))
    }

    pub fn scale(&self, x: &Var<T>, s: f64) -> Var<T> {
        let s = T::from_f64_lossy(s);
        let out = x.value().map(|v| v * s);
        self.record(out, &[x], move |g, _| vec![Some(g.map(|v| v * s))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_values() {
        let g = Graph::<f64>::new();
        let x = g.constant(t([1, 1, 1, 2], &[-1.0, 2.0]));
        assert_eq!(g.relu(&x).value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn prelu_negative_branch() {
        let g = Graph::<f64>::new();
        let x = g.constant(t([1, 1, 1, 2], &[-2.0, 3.0]));
        let a = g.constant(t([1, 1, 1, 1], &[0.25]));
        assert_eq!(g.prelu(&x, &a).unwrap().value().data(), &[-0.5, 3.0]);
    }

    #[test]
    fn sigmoid_zero_is_half() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 1, 1, 1]));
        assert_eq!(g.sigmoid(&x).value().data(), &[0.5]);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec([1, 1, 1, 2], vec![-1e4, 1e4]).unwrap());
        let s = g.sigmoid(&x);
        assert_eq!(s.value().data(), &[0.0, 1.0]);
    }

    #[test]
    fn per_channel_broadcast() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([2, 2, 2, 2]));
        let y = g.constant(t([1, 2, 1, 1], &[10.0, 20.0]));
        let z = g.add(&x, &y).unwrap();
        assert_eq!(z.value().at(1, 0, 1, 1), 11.0);
        assert_eq!(z.value().at(0, 1, 0, 0), 21.0);
    }

    #[test]
    fn non_broadcastable_rejected() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 2, 2, 2]));
        let y = g.constant(Tensor::ones([1, 3, 1, 1]));
        assert!(g.mul(&x, &y).is_err());
        assert!(g.add(&x, &y).is_err());
    }

    #[test]
    fn broadcast_gradient_reduces() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full([2, 3, 2, 2], 2.0));
        let y = g.leaf(Tensor::full([2, 3, 1, 1], 5.0));
        let z = g.mul(&x, &y).unwrap();
        let loss = g.sum(&z);
        let grads = g.backward(&loss).unwrap();
        assert!(grads.get(&y).unwrap().data().iter().all(|&v| v == 8.0));
        assert!(grads.get(&x).unwrap().data().iter().all(|&v| v == 5.0));
    }
}
