use std::fmt::Write as _;

use crate::error::{ensure, invalid, Result};
use crate::model::{parse_key_values, NetworkConfig};
use crate::ops::LossMode;

/// Optimization recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch: usize,
    pub patch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Evaluate every this many iterations; 0 disables.
    pub eval_every: u64,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    pub loss_mode: LossMode,
    /// Random crops drawn from each image per epoch.
    pub samples_per_image: usize,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// 1e5 iterations of batch 2 on 256×256 crops, lr 1e-4 → 1e-6.
    pub fn full() -> Self {
        TrainConfig {
            iterations: 100_000,
            batch: 2,
            patch: 256,
            lr_start: 1e-4,
            lr_end: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 5_000,
            loss_mode: LossMode::ElementwiseMean,
            samples_per_image: 10,
            clip_grad_norm: None,
        }
    }

    /// 2000 iterations on 64×64 crops.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 2_000,
            patch: 64,
            checkpoint_every: 500,
            ..Self::full()
        }
    }

    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        ensure!(self.batch >= 1, "batch must be at least 1");
        ensure!(self.iterations >= 1, "iterations must be at least 1");
        ensure!(self.samples_per_image >= 1, "samples_per_image must be at least 1");
        ensure!(
            self.lr_start.is_finite() && self.lr_end.is_finite() && self.lr_end >= 0.0,
            "learning rates must be finite and non-negative"
        );
        ensure!(
            self.lr_end <= self.lr_start,
            "lr_end {} exceeds lr_start {}",
            self.lr_end,
            self.lr_start
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "adam betas must lie in [0, 1)"
        );
        ensure!(self.adam_eps > 0.0, "adam epsilon must be positive");
        ensure!(
            self.patch > 0 && self.patch.is_multiple_of(net.pad_multiple()),
            "patch {} must be a positive multiple of {}",
            self.patch,
            net.pad_multiple()
        );
        if let Some(c) = self.clip_grad_norm {
            ensure!(c > 0.0 && c.is_finite(), "clip_grad_norm must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "patch = {}", self.patch);
        let _ = writeln!(s, "lr_start = {:?}", self.lr_start);
        let _ = writeln!(s, "lr_end = {:?}", self.lr_end);
        let _ = writeln!(s, "beta1 = {:?}", self.beta1);
        let _ = writeln!(s, "beta2 = {:?}", self.beta2);
        let _ = writeln!(s, "adam_eps = {:?}", self.adam_eps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "loss_mode = {}", self.loss_mode.as_str());
        let _ = writeln!(s, "samples_per_image = {}", self.samples_per_image);
        match self.clip_grad_norm {
            Some(c) => {
                let _ = writeln!(s, "clip_grad_norm = {c:?}");
            }
            None => {
                let _ = writeln!(s, "clip_grad_norm = none");
            }
        }
        s
    }

    /// Parse `key = value` lines over the full-recipe defaults. Unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::full().with_text(text)
    }

    /// Override fields of `self` from `key = value` lines.
    pub fn with_text(mut self, text: &str) -> Result<Self> {
        for (key, value) in parse_key_values(text)? {
            self.set(&key, &value)?;
        }
        Ok(self)
    }

    /// Set one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| invalid!("train config key {key}: cannot parse {value:?}"))
        }
        match key {
            "iterations" => self.iterations = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "lr_start" => self.lr_start = parse(key, value)?,
            "lr_end" => self.lr_end = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "loss_mode" => self.loss_mode = value.parse()?,
            "samples_per_image" => self.samples_per_image = parse(key, value)?,
            "clip_grad_norm" => {
                self.clip_grad_norm = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            other => return Err(invalid!("unknown train config key {other:?}")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::desk();
        c.lr_start = 0.1 + 0.2;
        c.clip_grad_norm = Some(1.5);
        c.loss_mode = LossMode::GlobalNorm;
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(TrainConfig::from_text("").unwrap(), TrainConfig::full());
    }

    #[test]
    fn validation() {
        let net = NetworkConfig::constant(3, 16);
        assert!(TrainConfig::desk().validate(&net).is_ok());
        let mut c = TrainConfig::desk();
        c.lr_end = 1.0;
        assert!(c.validate(&net).is_err());
        let mut c = TrainConfig::desk();
        c.patch = 60;
        assert!(c.validate(&net).is_err());
        let mut c = TrainConfig::desk();
        c.batch = 0;
        assert!(c.validate(&net).is_err());
        assert!(TrainConfig::from_text("momentum = 0.9").is_err());
    }
}
