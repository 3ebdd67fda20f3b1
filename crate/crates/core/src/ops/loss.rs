use std::str::FromStr;

use crate::error::{ensure, invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Charbonnier constant ε.
pub const CHARBONNIER_EPS: f64 = 1e-3;

/// How the Charbonnier penalty aggregates residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossMode {
    /// `mean(√(d² + ε²))` over every element.
    #[default]
    ElementwiseMean,
    /// `√(‖d‖² + ε²)` over the whole batch.
    GlobalNorm,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::ElementwiseMean => "mean",
            LossMode::GlobalNorm => "global",
        }
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LossMode::ElementwiseMean),
            "global" => Ok(LossMode::GlobalNorm),
            other => Err(invalid!("unknown loss mode {other:?} (expected mean or global)")),
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Charbonnier loss between a prediction and its target.
    ///
    /// Both modes are evaluated as `ε + Σ d²/(√(d²+ε²)+ε)`-style sums, which
    /// equal the textbook forms but return exactly `ε` for a zero residual.
    pub fn charbonnier(&self, pred: &Var<T>, target: &Var<T>, eps: f64, mode: LossMode) -> Result<Var<T>> {
        ensure!(
            pred.shape() == target.shape(),
            "charbonnier: prediction shape {} differs from target shape {}",
            pred.shape(),
            target.shape()
        );
        ensure!(eps > 0.0, "charbonnier epsilon must be positive, got {eps}");
        let shape = pred.shape();
        let count = shape.numel() as f64;
        let diff: Vec<f64> = pred
            .value()
            .data()
            .iter()
            .zip(target.value().data())
            .map(|(&a, &b)| a.to_f64().unwrap_or(f64::NAN) - b.to_f64().unwrap_or(f64::NAN))
            .collect();
        let eps2 = eps * eps;
        let (value, scales): (f64, Vec<f64>) = match mode {
            LossMode::ElementwiseMean => {
                let excess: f64 = diff.iter().map(|d| d * d / ((d * d + eps2).sqrt() + eps)).sum();
                let scales = diff.iter().map(|d| d / (d * d + eps2).sqrt() / count).collect();
                (excess / count, scales)
            }
            LossMode::GlobalNorm => {
                let sq: f64 = diff.iter().map(|d| d * d).sum();
                let norm = (sq + eps2).sqrt();
                (sq / (norm + eps), diff.iter().map(|d| d / norm).collect())
            }
        };
        let loss = T::from_f64_lossy(eps) + T::from_f64_lossy(value);
        let out = Tensor::full([1, 1, 1, 1], loss);
        Ok(self.record(out, &[pred, target], move |g, needs| {
            let up = g.data()[0].to_f64().unwrap_or(f64::NAN);
            let grad = || {
                Tensor::from_vec(shape, scales.iter().map(|s| T::from_f64_lossy(s * up)).collect())
                    .expect("loss gradient shape")
            };
            vec![needs[0].then(grad), needs[1].then(|| grad().map(|v| -v))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_loss(d: f64, mode: LossMode) -> f64 {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::full([1, 1, 1, 1], d));
        let b = g.constant(Tensor::zeros([1, 1, 1, 1]));
        g.charbonnier(&a, &b, CHARBONNIER_EPS, mode).unwrap().scalar().unwrap()
    }

    #[test]
    fn zero_residual_is_exactly_eps() {
        for mode in [LossMode::ElementwiseMean, LossMode::GlobalNorm] {
            let g = Graph::<f32>::new();
            let a = g.constant(Tensor::full([2, 3, 5, 7], 0.37));
            let loss = g.charbonnier(&a, &a, CHARBONNIER_EPS, mode).unwrap();
            assert_eq!(loss.scalar().unwrap(), 1e-3f32);
        }
    }

    #[test]
    fn closed_form_values() {
        assert!((scalar_loss(3e-3, LossMode::ElementwiseMean) - 1e-5f64.sqrt()).abs() < 1e-15);
        assert!((scalar_loss(1.0, LossMode::ElementwiseMean) - (1.0 + 1e-6f64).sqrt()).abs() < 1e-15);
        assert!((scalar_loss(3e-3, LossMode::GlobalNorm) - 3.1623e-3).abs() < 1e-7);
    }

    #[test]
    fn global_norm_sums_squares() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec([1, 1, 1, 2], vec![3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::zeros([1, 1, 1, 2]));
        let loss = g.charbonnier(&a, &b, CHARBONNIER_EPS, LossMode::GlobalNorm).unwrap();
        assert!((loss.scalar().unwrap() - (25.0f64 + 1e-6).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros([1, 1, 2, 3]));
        assert!(g
            .charbonnier(&a, &b, CHARBONNIER_EPS, LossMode::ElementwiseMean)
            .is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("global".parse::<LossMode>().unwrap(), LossMode::GlobalNorm);
        assert!("l2".parse::<LossMode>().is_err());
    }
}
