//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Checks always run in double precision: in single precision the rounding
//! error of a central difference swamps the tolerances these checks use.

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error used by every check: `|a − fd| / max(|a|, |fd|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Finite-difference configuration.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Probe at most this many elements per input (evenly spaced); all when `None`.
    pub max_probes: Option<usize>,
    /// Probes whose error reaches this value are examined for a kink (a
    /// ReLU/PReLU corner or a max switching channels) inside the stencil.
    /// `None` disables the analysis.
    pub kink_threshold: Option<f64>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            max_probes: None,
            kink_threshold: None,
        }
    }
}

/// Smallest step tried when a stencil straddles a kink.
pub const MIN_EPS: f64 = 1e-7;

/// Worst relative error per input, plus the location of the overall worst.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_input: Vec<f64>,
    pub worst: Option<(usize, usize)>,
    pub probes: usize,
    /// Probes re-measured with a smaller step after straddling a kink.
    pub retried: usize,
    /// Probes still straddling a kink at [`MIN_EPS`]; left out of `per_input`.
    pub excluded: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

impl GradCheck {
    pub fn with_probes(eps: f64, max_probes: usize) -> Self {
        GradCheck {
            eps,
            max_probes: Some(max_probes),
            kink_threshold: None,
        }
    }

    /// Compare the gradients of the scalar `f(inputs)` against central
    /// differences for every input tensor.
    ///
    /// With a `kink_threshold`, a probe whose error reaches the threshold is
    /// checked for non-smoothness: for a corner inside `[x−h, x+h]` the
    /// central-difference error is half the gap between the forward and
    /// backward one-sided differences, while a wrong gradient at a smooth
    /// point leaves the one-sided differences in agreement. A probe whose
    /// error is explained that way is re-measured with `h/10` down to
    /// [`MIN_EPS`]; if it still straddles a kink it is excluded and listed.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
    {
        ensure!(
            (MIN_EPS..=1e-4).contains(&self.eps),
            "finite-difference step {} outside [1e-7, 1e-4]",
            self.eps
        );
        let graph = Graph::new();
        let vars: Vec<Var<f64>> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
        let out = f(&graph, &vars)?;
        let base = out.scalar()?;
        let grads = graph.backward(&out)?;
        let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
        drop(grads);
        drop(out);
        drop(vars);
        drop(graph);

        let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
            let g = Graph::inference();
            let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            f(&g, &vars)?.scalar()
        };

        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut report = GradCheckReport {
            per_input: Vec::with_capacity(inputs.len()),
            worst: None,
            probes: 0,
            retried: 0,
            excluded: Vec::new(),
        };
        let mut worst_err = -1.0;
        for (which, grad) in analytic.iter().enumerate() {
            let len = grad.numel();
            let count = self.max_probes.map_or(len, |m| m.min(len));
            let mut max_err: f64 = 0.0;
            for p in 0..count {
                let i = if count == len {
                    p
                } else {
                    p * len / count + (len / count) / 2
                };
                let a = grad.data()[i];
                let mut h = self.eps;
                let mut measured = None;
                loop {
                    let orig = work[which].data()[i];
                    work[which].data_mut()[i] = orig + h;
                    let plus = eval(&work)?;
                    work[which].data_mut()[i] = orig - h;
                    let minus = eval(&work)?;
                    work[which].data_mut()[i] = orig;
                    let central = (plus - minus) / (2.0 * h);
                    let err = relative_error(a, central);
                    let kinked = match self.kink_threshold {
                        Some(t) if err >= t => {
                            let gap = ((plus - base) / h - (base - minus) / h).abs();
                            gap >= (central - a).abs()
                        }
                        _ => false,
                    };
                    if !kinked {
                        measured = Some(err);
                        break;
                    }
                    if h / 10.0 < MIN_EPS * 0.999 {
                        break;
                    }
                    h /= 10.0;
                    report.retried += 1;
                }
                report.probes += 1;
                match measured {
                    Some(err) => {
                        if err > worst_err {
                            worst_err = err;
                            report.worst = Some((which, i));
                        }
                        max_err = max_err.max(err);
                    }
                    None => report.excluded.push((which, i)),
                }
            }
            report.per_input.push(max_err);
        }
        Ok(report)
    }
}

/// Maximum relative error of `∂f/∂x` against central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Graph<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let check = GradCheck {
        eps,
        max_probes: None,
        kink_threshold: None,
    };
    let report = check.run(std::slice::from_ref(x), |g, v| f(g, &v[0]))?;
    Ok(report.max_error())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_fn([1, 2, 3, 3], |_, c, y, x| (c + y) as f64 - x as f64 * 0.5);
        let err = grad_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_step_out_of_range() {
        let x = Tensor::<f64>::zeros([1, 1, 1, 1]);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 1e-2).is_err());
    }

    #[test]
    fn kink_at_probe_is_excluded_not_hidden() {
        // |x| just right of 0: 5e-8 straddles the corner even at MIN_EPS, 3e-6
        // only at the default step.
        let x = Tensor::from_vec([1, 1, 1, 3], vec![5e-8, 3e-6, 0.7]).unwrap();
        let abs = |g: &Graph<f64>, v: &[Var<f64>]| -> Result<Var<f64>> {
            let pos = g.relu(&v[0]);
            let neg = g.relu(&g.scale(&v[0], -1.0));
            Ok(g.sum(&g.add(&pos, &neg)?))
        };
        let plain = GradCheck::default().run(std::slice::from_ref(&x), abs).unwrap();
        assert!(plain.max_error() > 0.5);
        let aware = GradCheck {
            kink_threshold: Some(1e-5),
            ..GradCheck::default()
        };
        let r = aware.run(std::slice::from_ref(&x), abs).unwrap();
        assert_eq!(r.excluded, vec![(0, 0)]);
        assert!(r.retried >= 3);
        assert!(r.max_error() < 1e-6, "{}", r.max_error());
    }

    #[test]
    fn wrong_gradient_is_not_mistaken_for_a_kink() {
        // y = 2x on the forward pass with a deliberately wrong backward (3x).
        let x = Tensor::from_vec([1, 1, 1, 3], vec![0.0, 0.3, -0.4]).unwrap();
        let wrong = |g: &Graph<f64>, v: &[Var<f64>]| -> Result<Var<f64>> {
            let two = g.scale(&v[0], 2.0);
            let three = g.scale(&v[0], 3.0);
            let diff = g.sub(&three, &two)?;
            let frozen = g.constant(diff.value().clone());
            Ok(g.sum(&g.sub(&three, &frozen)?))
        };
        let aware = GradCheck {
            kink_threshold: Some(1e-5),
            ..GradCheck::default()
        };
        let r = aware.run(std::slice::from_ref(&x), wrong).unwrap();
        assert!(r.excluded.is_empty());
        assert!(r.max_error() > 0.3);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 0.5).abs() < 1e-15);
    }
}
