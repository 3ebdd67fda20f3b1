//! Full-reference quality metrics on `[0, 1]` images.

use std::fmt;

use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Tensor};

/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        "metric inputs differ in shape: {} vs {}",
        a.shape(),
        b.shape()
    );
    ensure!(a.numel() > 0, "metric of an empty tensor");
    ensure!(
        a.all_finite() && b.all_finite(),
        "metric inputs contain non-finite values"
    );
    Ok(())
}

/// `10·log10(peak² / MSE)` with one MSE over every element and channel.
pub fn psnr<T: Scalar>(x_hat: &Tensor<T>, x: &Tensor<T>, peak: f64) -> Result<f64> {
    check_pair(x_hat, x)?;
    ensure!(peak > 0.0, "peak must be positive, got {peak}");
    let sse: f64 = x_hat
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| {
            let d = a.to_f64().unwrap() - b.to_f64().unwrap();
            d * d
        })
        .sum();
    let mse = sse / x.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Separable "valid" filtering: output is `(h-10)×(w-10)`.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, a)| a * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, k);
    let mu_b = filter_valid(b, h, w, k);
    let aa = filter_valid(&prod(&|p, _| p * p), h, w, k);
    let bb = filter_valid(&prod(&|_, q| q * q), h, w, k);
    let ab = filter_valid(&prod(&|p, q| p * q), h, w, k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Single-scale SSIM: 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, valid window positions only, averaged per
/// channel then over channels and images.
pub fn ssim<T: Scalar>(x_hat: &Tensor<T>, x: &Tensor<T>) -> Result<f64> {
    check_pair(x_hat, x)?;
    let s = x.shape();
    ensure!(
        s.h >= SSIM_WINDOW && s.w >= SSIM_WINDOW,
        "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
        s.h,
        s.w
    );
    let k = gaussian_window();
    let to64 = |p: &[T]| p.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>();
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            total += ssim_plane(&to64(x_hat.plane(n, c)), &to64(x.plane(n, c)), s.h, s.w, &k);
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

/// Per-image scores and their means.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn push<T: Scalar>(
        &mut self,
        name: impl Into<String>,
        x_hat: &Tensor<T>,
        x: &Tensor<T>,
    ) -> Result<&ImageScore> {
        let score = ImageScore {
            name: name.into(),
            psnr_db: psnr(x_hat, x, 1.0)?,
            ssim: ssim(x_hat, x)?,
        };
        self.images.push(score);
        Ok(self.images.last().expect("just pushed"))
    }

    pub fn mean_psnr(&self) -> f64 {
        self.images.iter().map(|s| s.psnr_db).sum::<f64>() / self.images.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.images.iter().map(|s| s.ssim).sum::<f64>() / self.images.len().max(1) as f64
    }

    /// `name,psnr_db,ssim` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr_db,ssim\n");
        for s in &self.images {
            out.push_str(&format!("{},{:.6},{:.6}\n", s.name, s.psnr_db, s.ssim));
        }
        out.push_str(&format!("mean,{:.6},{:.6}\n", self.mean_psnr(), self.mean_ssim()));
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.images.iter().map(|s| s.name.len()).max().unwrap_or(0).max(4);
        writeln!(f, "{:<width$}  {:>9}  {:>7}", "name", "psnr_db", "ssim")?;
        for s in &self.images {
            writeln!(f, "{:<width$}  {:>9.4}  {:>7.4}", s.name, s.psnr_db, s.ssim)?;
        }
        write!(
            f,
            "{:<width$}  {:>9.4}  {:>7.4}",
            "mean",
            self.mean_psnr(),
            self.mean_ssim()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_identical_is_capped() {
        let a = Tensor::<f32>::full([1, 3, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_half_difference() {
        let a = Tensor::<f64>::full([1, 3, 8, 8], 0.25);
        let b = Tensor::<f64>::full([1, 3, 8, 8], 0.75);
        assert!((psnr(&a, &b, 1.0).unwrap() - 6.0206).abs() < 1e-3);
    }

    #[test]
    fn psnr_quantized_step() {
        let a = Tensor::<f64>::full([1, 3, 8, 8], 100.0 / 255.0);
        let b = Tensor::<f64>::full([1, 3, 8, 8], 116.0 / 255.0);
        assert!((psnr(&a, &b, 1.0).unwrap() - 24.048).abs() < 1e-3);
    }

    #[test]
    fn ssim_constants() {
        let a = Tensor::<f64>::full([1, 3, 16, 16], 0.25);
        let b = Tensor::<f64>::full([1, 3, 16, 16], 0.75);
        let expected = (2.0 * 0.1875 + 1e-4) / (0.0625 + 0.5625 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.6).abs() < 1e-3);
    }

    #[test]
    fn ssim_self_is_one() {
        let a = Tensor::<f64>::from_fn([1, 3, 20, 17], |_, c, y, x| ((c + y * x) % 7) as f64 / 7.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_small_and_mismatched() {
        let a = Tensor::<f64>::zeros([1, 3, 10, 20]);
        assert!(ssim(&a, &a).is_err());
        let b = Tensor::<f64>::zeros([1, 3, 10, 21]);
        assert!(psnr(&a, &b, 1.0).is_err());
        let mut c = a.clone();
        c.data_mut()[0] = f64::NAN;
        assert!(psnr(&a, &c, 1.0).is_err());
    }

    #[test]
    fn report_means() {
        let a = Tensor::<f64>::full([1, 3, 16, 16], 0.25);
        let b = Tensor::<f64>::full([1, 3, 16, 16], 0.75);
        let mut r = MetricReport::default();
        r.push("same", &a, &a).unwrap();
        r.push("diff", &a, &b).unwrap();
        assert!((r.mean_psnr() - (100.0 + 10.0 * 4f64.log10()) / 2.0).abs() < 1e-9);
        assert!(r.to_csv().lines().last().unwrap().starts_with("mean,"));
    }
}
