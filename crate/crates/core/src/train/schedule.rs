use std::f64::consts::PI;

/// Cosine annealing from `lr_start` at `t = 0` to `lr_end` at `t = total`.
/// Steps past `total` stay at `lr_end`.
pub fn cosine_lr(t: u64, total: u64, lr_start: f64, lr_end: f64) -> f64 {
    if total == 0 || t >= total {
        return lr_end;
    }
    if t == 0 {
        return lr_start;
    }
    let phase = PI * t as f64 / total as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + phase.cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 1000, 1e-4, 1e-6), 1e-4);
        assert_eq!(cosine_lr(1000, 1000, 1e-4, 1e-6), 1e-6);
        assert_eq!(cosine_lr(5000, 1000, 1e-4, 1e-6), 1e-6);
        assert!((cosine_lr(500, 1000, 1e-4, 1e-6) - 5.05e-5).abs() < 1e-18);
    }

    #[test]
    fn non_increasing() {
        let lrs: Vec<f64> = (0..=777).map(|t| cosine_lr(t, 777, 1e-4, 1e-6)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
