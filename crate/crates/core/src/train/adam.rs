use crate::error::{ensure, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> std::fmt::Debug for Adam<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Adam")
            .field("beta1", &self.beta1)
            .field("beta2", &self.beta2)
            .field("eps", &self.eps)
            .field("step", &self.step)
            .field("tensors", &self.m.len())
            .finish()
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Check that the moment buffers line up with `params`.
    pub fn validate(&self, params: &ParamStore<T>) -> Result<()> {
        ensure!(
            self.m.len() == params.len() && self.v.len() == params.len(),
            "optimizer holds {} moment pairs for {} parameters",
            self.m.len(),
            params.len()
        );
        for (i, (name, t)) in params.iter().enumerate() {
            ensure!(
                self.m[i].shape() == t.shape() && self.v[i].shape() == t.shape(),
                "optimizer moments for {name} have the wrong shape"
            );
        }
        Ok(())
    }

    /// One update `θ ← θ − lr·m̂/(√v̂ + ε)`. `grads[i]` belongs to the i-th parameter.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        self.validate(params)?;
        ensure!(
            grads.len() == params.len(),
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        );
        for (id, g) in params.ids().zip(grads) {
            let g = g
                .as_ref()
                .ok_or_else(|| Error::InvalidState(format!("no gradient for parameter {}", params.name(id))))?;
            ensure!(
                g.shape() == params.get(id).shape(),
                "gradient for {} has shape {}",
                params.name(id),
                g.shape()
            );
        }
        self.step += 1;
        let t = self.step as i32;
        let c = |v: f64| T::from_f64_lossy(v);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let (one_b1, one_b2) = (c(1.0 - self.beta1), c(1.0 - self.beta2));
        let corr1 = c(1.0 / (1.0 - self.beta1.powi(t)));
        let corr2 = c(1.0 / (1.0 - self.beta2.powi(t)));
        let (lr, eps) = (c(lr), c(self.eps));
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[i].as_ref().expect("checked above");
            let theta = params.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &gi), mi), vi) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi * corr1;
                let v_hat = *vi * corr2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBuilder;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut b = ParamBuilder::new(0);
        let id = b.constant("w", [1, values.len(), 1, 1], 0.0).unwrap();
        let mut s = b.finish();
        s.get_mut(id).data_mut().copy_from_slice(values);
        s
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut p = store(&[1.0, 1.0, 1.0]);
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        let g = Tensor::from_vec([1, 3, 1, 1], vec![0.5, -2.0, 1e-3]).unwrap();
        adam.update(&mut p, &[Some(g.clone())], 1e-2).unwrap();
        for (after, gi) in p.get(p.ids().next().unwrap()).data().iter().zip(g.data()) {
            let expected = 1.0 - 1e-2 * gi / (gi.abs() + 1e-8);
            assert!((after - expected).abs() < 1e-15, "{after} vs {expected}");
        }
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = store(&[0.3]);
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        adam.update(&mut p, &[Some(Tensor::zeros([1, 1, 1, 1]))], 0.1).unwrap();
        assert_eq!(p.get(p.ids().next().unwrap()).data(), &[0.3]);
        let one = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        adam.update(&mut p, &[Some(one)], 0.0).unwrap();
        let (m0, v0) = (adam.m[0].data()[0], adam.v[0].data()[0]);
        adam.update(&mut p, &[Some(Tensor::zeros([1, 1, 1, 1]))], 0.1).unwrap();
        assert!((adam.m[0].data()[0] - 0.9 * m0).abs() < 1e-18);
        assert!((adam.v[0].data()[0] - 0.999 * v0).abs() < 1e-18);
        let stepped = p.get(p.ids().next().unwrap()).data()[0];
        assert!(stepped < 0.3);
    }

    #[test]
    fn missing_gradient_is_invalid_state() {
        let mut p = store(&[0.0]);
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        let err = adam.update(&mut p, &[None], 1e-3).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
        assert_eq!(adam.step, 0);
    }
}
