//! Merging of presets, the `--config` file and command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hwmnet::model::parse_key_values;
use hwmnet::train::TrainConfig;
use hwmnet::NetworkConfig;

use crate::{Failure, Outcome, TrainArgs};

/// Keys of a `--config` file, split into network and training keys.
#[derive(Debug, Default)]
pub struct ConfigFile {
    path: Option<PathBuf>,
    network: BTreeMap<String, String>,
    train: BTreeMap<String, String>,
}

fn to_text(map: &BTreeMap<String, String>) -> String {
    let mut s = String::new();
    for (k, v) in map {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Outcome<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text =
            std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("--config {}: {e}", path.display())))?;
        let map = parse_key_values(&text).map_err(|e| Failure::Invalid(format!("--config {}: {e}", path.display())))?;
        let mut file = ConfigFile {
            path: Some(path.to_path_buf()),
            ..ConfigFile::default()
        };
        for (k, v) in map {
            if NetworkConfig::KEYS.contains(&k.as_str()) {
                file.network.insert(k, v);
            } else {
                file.train.insert(k, v);
            }
        }
        // Typos in training keys are reported by every verb, not only `train`.
        TrainConfig::full()
            .with_text(&to_text(&file.train))
            .map_err(|e| file.invalid(e))?;
        Ok(file)
    }

    fn invalid(&self, e: impl std::fmt::Display) -> Failure {
        match &self.path {
            Some(p) => Failure::Invalid(format!("--config {}: {e}", p.display())),
            None => Failure::Invalid(e.to_string()),
        }
    }

    /// Network described by the file alone, if it names any network key.
    pub fn network(&self) -> Outcome<Option<NetworkConfig>> {
        if self.network.is_empty() {
            return Ok(None);
        }
        NetworkConfig::from_text(&to_text(&self.network))
            .map(Some)
            .map_err(|e| self.invalid(e))
    }

    /// A checkpoint's network must agree with the file's, when it gives one.
    pub fn check_network(&self, found: &NetworkConfig, weights: &Path) -> Outcome {
        match self.network()? {
            Some(expected) if &expected != found => Err(self.invalid(format!(
                "describes a different network than --weights {}:\n{}",
                weights.display(),
                found.to_text()
            ))),
            _ => Ok(()),
        }
    }

    /// Network and training recipe for a fresh run: preset, then file, then flags.
    pub fn fresh_run(&self, args: &TrainArgs, seed: Option<u64>) -> Outcome<(NetworkConfig, TrainConfig)> {
        let mut net = BTreeMap::new();
        if args.desk {
            net.insert("levels".to_string(), "3".to_string());
            net.insert("base_width".to_string(), "16".to_string());
            net.insert("schedule".to_string(), "constant".to_string());
        }
        net.extend(self.network.clone());
        if let Some(l) = args.levels {
            net.insert("levels".into(), l.to_string());
        }
        if let Some(w) = args.width {
            net.insert("base_width".into(), w.to_string());
        }
        if let Some(s) = args.schedule {
            net.insert("schedule".into(), s.as_str().into());
        }
        if (args.levels.is_some() || args.width.is_some() || args.schedule.is_some()) && net.contains_key("widths") {
            return Err(
                self.invalid("an explicit `widths` list cannot be combined with --levels, --width or --schedule")
            );
        }
        let network = NetworkConfig::from_text(&to_text(&net)).map_err(|e| self.invalid(e))?;

        let base = if args.desk {
            TrainConfig::desk()
        } else {
            TrainConfig::full()
        };
        let mut train = base.with_text(&to_text(&self.train)).map_err(|e| self.invalid(e))?;
        if let Some(v) = args.iters {
            train.iterations = v;
        }
        if let Some(v) = args.batch {
            train.batch = v;
        }
        if let Some(v) = args.patch {
            train.patch = v;
        }
        if let Some(v) = args.loss {
            train.loss_mode = match v {
                crate::Loss::Mean => hwmnet::ops::LossMode::ElementwiseMean,
                crate::Loss::Global => hwmnet::ops::LossMode::GlobalNorm,
            };
        }
        if let Some(v) = args.lr {
            train.lr_start = v;
        }
        if let Some(v) = args.lr_end {
            train.lr_end = v;
        }
        if let Some(v) = args.clip_grad_norm {
            train.clip_grad_norm = Some(v);
        }
        if let Some(v) = args.checkpoint_every {
            train.checkpoint_every = v;
        }
        if let Some(v) = args.eval_every {
            train.eval_every = v;
        }
        if let Some(v) = seed {
            train.seed = v;
        }
        train.validate(&network).map_err(Failure::from)?;
        Ok((network, train))
    }

    /// Flags that would silently change a resumed run are refused.
    pub fn check_resumable(&self, args: &TrainArgs) -> Outcome {
        let fixed = [
            ("--desk", args.desk),
            ("--batch", args.batch.is_some()),
            ("--patch", args.patch.is_some()),
            ("--width", args.width.is_some()),
            ("--levels", args.levels.is_some()),
            ("--schedule", args.schedule.is_some()),
            ("--loss", args.loss.is_some()),
            ("--lr", args.lr.is_some()),
            ("--lr-end", args.lr_end.is_some()),
            ("--clip-grad-norm", args.clip_grad_norm.is_some()),
            ("--config", self.path.is_some()),
        ];
        for (flag, given) in fixed {
            if given {
                return Err(Failure::Invalid(format!(
                    "{flag} cannot be combined with --resume; the checkpoint fixes the network and recipe"
                )));
            }
        }
        Ok(())
    }
}

/// Worker cap from `HWMNET_THREADS`, defaulting to the available cores.
pub fn worker_cap() -> Outcome<usize> {
    match std::env::var("HWMNET_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::Invalid(format!(
                "HWMNET_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(std::env::VarError::NotPresent) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        Err(std::env::VarError::NotUnicode(v)) => Err(Failure::Invalid(format!(
            "HWMNET_THREADS must be a positive integer, got {v:?}"
        ))),
    }
}
