use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{center_crop, sample_rng, DatasetIndex, Image8, PatchSample};
use crate::error::{ensure, Error, Result};
use crate::graph::Graph;
use crate::metrics::MetricReport;
use crate::model::HwmNet;
use crate::ops::CHARBONNIER_EPS;
use crate::tensor::Tensor;
use crate::train::adam::Adam;
use crate::train::checkpoint::{Checkpoint, TrainState};
use crate::train::config::TrainConfig;
use crate::train::schedule::cosine_lr;

const PATCH_KEY: u64 = 0x5EED_0000_0000_0001;
const SHUFFLE_KEY: u64 = 0x5EED_0000_0000_0002;

/// Header of the loss curve CSV.
pub const LOSS_CSV_HEADER: &str = "iteration,lr,loss";

/// A decoded training or evaluation pair.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub name: String,
    pub low: Image8,
    pub gt: Image8,
}

impl TrainPair {
    pub fn load_all(index: &DatasetIndex) -> Result<Vec<TrainPair>> {
        index
            .records
            .iter()
            .map(|r| {
                let (low, gt) = r.load()?;
                Ok(TrainPair {
                    name: r.name.clone(),
                    low,
                    gt,
                })
            })
            .collect()
    }
}

/// Outcome of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Zero-based index of the step.
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{:e},{:e}", self.iteration, self.lr, self.loss)
    }
}

/// Owns the network, optimizer state and decoded data.
pub struct Trainer {
    net: HwmNet<f32>,
    config: TrainConfig,
    optimizer: Adam<f32>,
    iteration: u64,
    pairs: Vec<TrainPair>,
    order: Option<(u64, Vec<u32>)>,
}

impl Trainer {
    pub fn new(net: HwmNet<f32>, config: TrainConfig, pairs: Vec<TrainPair>) -> Result<Self> {
        let optimizer = Adam::new(net.params(), config.beta1, config.beta2, config.adam_eps);
        Self::assemble(net, config, optimizer, 0, pairs)
    }

    /// Continue from a checkpoint that carries a training state.
    pub fn resume(checkpoint: Checkpoint, pairs: Vec<TrainPair>) -> Result<Self> {
        let state = checkpoint
            .train
            .clone()
            .ok_or_else(|| Error::InvalidState("checkpoint holds no training state".into()))?;
        ensure!(
            state.seed == state.config.seed,
            "checkpoint seed {} disagrees with its train config seed {}",
            state.seed,
            state.config.seed
        );
        let net = checkpoint.into_net()?;
        Self::assemble(net, state.config, state.optimizer, state.iteration, pairs)
    }

    fn assemble(
        net: HwmNet<f32>,
        config: TrainConfig,
        optimizer: Adam<f32>,
        iteration: u64,
        pairs: Vec<TrainPair>,
    ) -> Result<Self> {
        config.validate(net.config())?;
        optimizer.validate(net.params())?;
        if pairs.is_empty() {
            return Err(Error::InvalidDataset("no training pairs".into()));
        }
        for p in &pairs {
            ensure!(
                (p.low.height, p.low.width) == (p.gt.height, p.gt.width),
                "pair {} has mismatched sizes",
                p.name
            );
            ensure!(
                p.low.height >= config.patch && p.low.width >= config.patch,
                "image {} is {}x{}, smaller than the {} patch",
                p.name,
                p.low.height,
                p.low.width,
                config.patch
            );
        }
        Ok(Trainer {
            net,
            config,
            optimizer,
            iteration,
            pairs,
            order: None,
        })
    }

    pub fn net(&self) -> &HwmNet<f32> {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &Adam<f32> {
        &self.optimizer
    }

    /// Completed steps.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        cosine_lr(t, self.config.iterations, self.config.lr_start, self.config.lr_end)
    }

    /// Crops used by step `t`. An epoch visits every image
    /// `samples_per_image` times in an order shuffled per epoch.
    pub fn batch_plan(&mut self, t: u64) -> Result<Vec<PatchSample>> {
        let per_image = self.config.samples_per_image;
        let epoch_len = (self.pairs.len() * per_image) as u64;
        let batch = self.config.batch as u64;
        (0..batch)
            .map(|b| {
                let sample = t * batch + b;
                let epoch = sample / epoch_len;
                let order = self.epoch_order(epoch, epoch_len as usize);
                let record = order[(sample % epoch_len) as usize] as usize / per_image;
                let pair = &self.pairs[record];
                let mut rng = sample_rng(self.config.seed ^ PATCH_KEY, record, sample);
                PatchSample::draw(record, (pair.low.height, pair.low.width), self.config.patch, &mut rng)
            })
            .collect()
    }

    fn epoch_order(&mut self, epoch: u64, len: usize) -> &[u32] {
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ SHUFFLE_KEY);
            rng.set_stream(epoch);
            let mut order: Vec<u32> = (0..len as u32).collect();
            order.shuffle(&mut rng);
            self.order = Some((epoch, order));
        }
        &self.order.as_ref().expect("just filled").1
    }

    fn assemble_batch(&self, plan: &[PatchSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let p = self.config.patch;
        let mut low = Vec::with_capacity(plan.len() * 3 * p * p);
        let mut gt = Vec::with_capacity(plan.len() * 3 * p * p);
        for s in plan {
            let pair = &self.pairs[s.record];
            let (l, g) = s.extract::<f32>(&pair.low, &pair.gt)?;
            low.extend_from_slice(l.data());
            gt.extend_from_slice(g.data());
        }
        Ok((
            Tensor::from_vec([plan.len(), 3, p, p], low)?,
            Tensor::from_vec([plan.len(), 3, p, p], gt)?,
        ))
    }

    /// Run one step: sample, forward, Charbonnier loss, backward, Adam update.
    pub fn step(&mut self) -> Result<StepRecord> {
        ensure!(
            !self.is_done(),
            "training already finished {} iterations",
            self.config.iterations
        );
        let t = self.iteration;
        let lr = self.lr_at(t);
        let plan = self.batch_plan(t)?;
        let (low, gt) = self.assemble_batch(&plan)?;

        let g = Graph::new();
        let bound = self.net.params().bind(&g);
        let x = g.constant(low);
        let target = g.constant(gt);
        let pred = self.net.forward(&g, &bound, &x)?;
        let loss_var = g.charbonnier(&pred, &target, CHARBONNIER_EPS, self.config.loss_mode)?;
        let loss = loss_var.scalar()? as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: t,
                lr,
                samples: plan
                    .iter()
                    .map(|s| format!("{}@({},{})", self.pairs[s.record].name, s.y, s.x))
                    .collect(),
            });
        }
        let mut grads = g.backward(&loss_var)?;
        let mut per_param: Vec<Option<Tensor<f32>>> = bound.vars().iter().map(|v| grads.take(v)).collect();
        drop(bound);
        drop(g);
        if let Some(limit) = self.config.clip_grad_norm {
            clip_global_norm(&mut per_param, limit);
        }
        self.optimizer.update(self.net.params_mut(), &per_param, lr)?;
        self.iteration += 1;
        Ok(StepRecord { iteration: t, lr, loss })
    }

    /// Step until `until` (capped at the configured total), calling `on_step`
    /// after every step.
    pub fn run(&mut self, until: u64, mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>) -> Result<()> {
        let end = until.min(self.config.iterations);
        while self.iteration < end {
            let record = self.step()?;
            on_step(self, &record)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.net.config().clone(),
            params: self.net.params().clone(),
            train: Some(TrainState {
                config: self.config.clone(),
                seed: self.config.seed,
                iteration: self.iteration,
                optimizer: self.optimizer.clone(),
            }),
        }
    }

    /// Score the current parameters on `pairs`, optionally on center crops.
    /// Outputs are clamped to `[0, 1]` first.
    pub fn evaluate(&self, pairs: &[TrainPair], crop: Option<usize>) -> Result<MetricReport> {
        evaluate(&self.net, pairs, crop)
    }
}

/// Enhance each low image and compare with its ground truth.
pub fn evaluate(net: &HwmNet<f32>, pairs: &[TrainPair], crop: Option<usize>) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for p in pairs {
        let (mut low, mut gt) = (p.low.to_tensor::<f32>(), p.gt.to_tensor::<f32>());
        if let Some(size) = crop {
            low = center_crop(&low, size)?;
            gt = center_crop(&gt, size)?;
        }
        let out = net.infer(&low)?.map(|v| v.clamp(0.0, 1.0));
        report.push(p.name.clone(), &out, &gt)?;
    }
    Ok(report)
}

fn clip_global_norm(grads: &mut [Option<Tensor<f32>>], limit: f64) {
    let total: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > limit {
        let scale = (limit / total) as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkConfig;

    fn pair(name: &str, h: usize, w: usize, shade: u8) -> TrainPair {
        let rgb: Vec<u8> = (0..h * w * 3).map(|i| (i % 200) as u8 / 2 + shade).collect();
        let img = Image8 {
            height: h,
            width: w,
            rgb,
        };
        TrainPair {
            name: name.into(),
            low: img.clone(),
            gt: img,
        }
    }

    fn tiny_trainer(iters: u64) -> Trainer {
        let net = HwmNet::build(NetworkConfig::constant(2, 8), 0).unwrap();
        let cfg = TrainConfig {
            iterations: iters,
            patch: 16,
            batch: 2,
            samples_per_image: 3,
            ..TrainConfig::desk()
        };
        Trainer::new(net, cfg, vec![pair("a", 20, 24, 0), pair("b", 32, 16, 40)]).unwrap()
    }

    #[test]
    fn epoch_visits_every_image_equally() {
        let mut t = tiny_trainer(100);
        let mut counts = [0usize; 2];
        for step in 0..3 {
            for s in t.batch_plan(step).unwrap() {
                counts[s.record] += 1;
            }
        }
        assert_eq!(counts, [3, 3]);
    }

    #[test]
    fn identical_pair_with_zero_params_gives_eps_loss() {
        let mut t = tiny_trainer(5);
        t.net.params_mut().zero_all();
        let rec = t.step().unwrap();
        assert!((rec.loss - CHARBONNIER_EPS).abs() < 1e-9);
        assert_eq!(rec.lr, 1e-4);
    }

    #[test]
    fn rejects_small_images_and_finished_runs() {
        let net = HwmNet::build(NetworkConfig::constant(2, 8), 0).unwrap();
        let cfg = TrainConfig {
            patch: 64,
            ..TrainConfig::desk()
        };
        assert!(Trainer::new(net, cfg, vec![pair("a", 20, 24, 0)]).is_err());
        let mut t = tiny_trainer(1);
        t.step().unwrap();
        assert!(t.step().is_err());
    }

    #[test]
    fn csv_line_format() {
        let r = StepRecord {
            iteration: 3,
            lr: 1e-4,
            loss: 0.25,
        };
        assert_eq!(r.csv_line(), "3,1e-4,2.5e-1");
    }
}
