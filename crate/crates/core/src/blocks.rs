//! Feature blocks: channel and spatial attention, the dual attention unit,
//! the half wavelet attention block and selective kernel feature fusion.
//!
//! Every block is a plain struct of [`ParamId`]s created through a
//! [`ParamBuilder`]; `forward` evaluates it on a [`Graph`] against parameters
//! bound with [`ParamStore::bind`](crate::params::ParamStore::bind).

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::Scalar;

/// Hyperparameters of the attention blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Channel-attention squeeze ratio.
    pub ca_reduction: usize,
    /// Spatial-attention kernel size (odd).
    pub sa_kernel: usize,
    /// SKFF squeeze ratio.
    pub skff_reduction: usize,
    /// Smallest SKFF descriptor width.
    pub skff_floor: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            ca_reduction: 8,
            sa_kernel: 7,
            skff_reduction: 8,
            skff_floor: 4,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.ca_reduction >= 1, "ca_reduction must be positive");
        ensure!(self.skff_reduction >= 1, "skff_reduction must be positive");
        ensure!(self.skff_floor >= 1, "skff_floor must be positive");
        ensure!(
            self.sa_kernel % 2 == 1,
            "spatial attention kernel must be odd, got {}",
            self.sa_kernel
        );
        Ok(())
    }

    /// Width of the SKFF channel descriptor for `channels` inputs.
    pub fn skff_width(&self, channels: usize) -> usize {
        (channels / self.skff_reduction).max(self.skff_floor)
    }
}

/// Convolution layer with bias, stride 1 and size-preserving padding.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        ensure!(k % 2 == 1, "convolution {name} needs an odd kernel, got {k}");
        b.scope(name, |b| {
            Ok(Conv {
                weight: b.fan_in_uniform("weight", [cout, cin, k, k])?,
                bias: b.constant("bias", [1, cout, 1, 1], 0.0)?,
                in_channels: cin,
                out_channels: cout,
                kernel: k,
            })
        })
    }

    /// Same shapes as [`Conv::build`] with all weights zero.
    pub fn build_zeroed<T: Scalar>(
        b: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Result<Self> {
        ensure!(k % 2 == 1, "convolution {name} needs an odd kernel, got {k}");
        b.scope(name, |b| {
            Ok(Conv {
                weight: b.constant("weight", [cout, cin, k, k], 0.0)?,
                bias: b.constant("bias", [1, cout, 1, 1], 0.0)?,
                in_channels: cin,
                out_channels: cout,
                kernel: k,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.kernel / 2, 1)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// Per-channel PReLU; slopes start at 0.25.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub alpha: ParamId,
}

impl PRelu {
    pub const INIT: f64 = 0.25;

    pub fn build<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, channels: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(PRelu {
                alpha: b.constant("alpha", [1, channels, 1, 1], Self::INIT)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        g.prelu(x, p.var(self.alpha))
    }
}

/// Squeeze-and-excitation gating: `x ⊙ σ(W₂ relu(W₁ GAP(x)))`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub squeeze: Conv,
    pub excite: Conv,
}

impl ChannelAttention {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<T>, channels: usize, reduction: usize) -> Result<Self> {
        ensure!(
            channels >= reduction,
            "channel attention needs at least {reduction} channels, got {channels}"
        );
        let hidden = channels / reduction;
        b.scope("ca", |b| {
            Ok(ChannelAttention {
                squeeze: Conv::build(b, "fc1", channels, hidden, 1)?,
                excite: Conv::build(b, "fc2", hidden, channels, 1)?,
            })
        })
    }

    /// Per-channel gates in `(0, 1)`, shape `(n, c, 1, 1)`.
    pub fn gates<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        ensure!(
            x.shape().c == self.squeeze.in_channels,
            "channel attention expects {} channels, got {}",
            self.squeeze.in_channels,
            x.shape().c
        );
        let pooled = g.global_avg_pool(x)?;
        let z = g.relu(&self.squeeze.forward(g, p, &pooled)?);
        Ok(g.sigmoid(&self.excite.forward(g, p, &z)?))
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let gates = self.gates(g, p, x)?;
        g.mul(x, &gates)
    }
}

/// Spatial gating from the channel-wise mean and max maps.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv,
}

impl SpatialAttention {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<T>, kernel: usize) -> Result<Self> {
        ensure!(kernel % 2 == 1, "spatial attention kernel must be odd, got {kernel}");
        b.scope("sa", |b| {
            Ok(SpatialAttention {
                conv: Conv::build(b, "conv", 2, 1, kernel)?,
            })
        })
    }

    /// Attention map in `(0, 1)`, shape `(n, 1, h, w)`.
    pub fn map<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let avg = g.channel_mean(x)?;
        let max = g.channel_max(x)?;
        let pooled = g.concat_channels(&[&avg, &max])?;
        Ok(g.sigmoid(&self.conv.forward(g, p, &pooled)?))
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let map = self.map(g, p, x)?;
        g.mul(x, &map)
    }
}

/// Dual attention unit: a conv–PReLU–conv trunk whose output is gated by
/// channel and spatial attention in parallel, merged by a 1×1 convolution and
/// added back onto the input.
#[derive(Debug, Clone)]
pub struct Dau {
    pub channels: usize,
    pub body_in: Conv,
    pub body_act: PRelu,
    pub body_out: Conv,
    pub ca: ChannelAttention,
    pub sa: SpatialAttention,
    pub merge: Conv,
}

impl Dau {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<T>, channels: usize, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        b.scope("dau", |b| {
            Ok(Dau {
                channels,
                body_in: Conv::build(b, "body1", channels, channels, 3)?,
                body_act: PRelu::build(b, "act", channels)?,
                body_out: Conv::build(b, "body2", channels, channels, 3)?,
                ca: ChannelAttention::build(b, channels, cfg.ca_reduction)?,
                sa: SpatialAttention::build(b, cfg.sa_kernel)?,
                merge: Conv::build(b, "merge", 2 * channels, channels, 1)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        ensure!(
            x.shape().c == self.channels,
            "dau expects {} channels, got {}",
            self.channels,
            x.shape().c
        );
        let t = self.body_in.forward(g, p, x)?;
        let t = self.body_act.forward(g, p, &t)?;
        let t = self.body_out.forward(g, p, &t)?;
        let ca = self.ca.forward(g, p, &t)?;
        let sa = self.sa.forward(g, p, &t)?;
        let both = g.concat_channels(&[&ca, &sa])?;
        let merged = self.merge.forward(g, p, &both)?;
        g.add(x, &merged)
    }
}

/// Half wavelet attention block.
///
/// The input is split channel-wise in half. The first half passes through
/// untouched; the second is moved to the Haar domain (four subbands at half
/// resolution, so `2c` channels), refined by a [`Dau`] and transformed back.
/// The two halves are re-joined, fused by a 3×3 convolution and PReLU, and a
/// 1×1 projection of the full input is added as the shortcut.
#[derive(Debug, Clone)]
pub struct Hwab {
    pub channels: usize,
    pub dau: Dau,
    pub fuse: Conv,
    pub act: PRelu,
    pub shortcut: Conv,
}

impl Hwab {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<T>, channels: usize, cfg: &AttentionConfig) -> Result<Self> {
        ensure!(
            channels.is_multiple_of(2),
            "hwab needs an even channel count, got {channels}"
        );
        b.scope("hwab", |b| {
            Ok(Hwab {
                channels,
                dau: Dau::build(b, 2 * channels, cfg)?,
                fuse: Conv::build(b, "fuse", channels, channels, 3)?,
                act: PRelu::build(b, "act", channels)?,
                shortcut: Conv::build(b, "shortcut", channels, channels, 1)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        ensure!(
            s.c == self.channels,
            "hwab expects {} channels, got {}",
            self.channels,
            s.c
        );
        ensure!(
            s.h.is_multiple_of(2) && s.w.is_multiple_of(2),
            "hwab needs even spatial dims, got {}x{}",
            s.h,
            s.w
        );
        let half = s.c / 2;
        let parts = g.split_channels(x, &[half, half])?;
        let (identity, wavelet_half) = (&parts[0], &parts[1]);
        let subbands = g.dwt_haar(wavelet_half)?;
        let refined = self.dau.forward(g, p, &subbands)?;
        let restored = g.iwt_haar(&refined)?;
        let joined = g.concat_channels(&[&restored, identity])?;
        let residual = self.act.forward(g, p, &self.fuse.forward(g, p, &joined)?)?;
        let shortcut = self.shortcut.forward(g, p, x)?;
        g.add(&residual, &shortcut)
    }
}

/// Selective kernel feature fusion of `branches` same-shaped inputs.
#[derive(Debug, Clone)]
pub struct Skff {
    pub channels: usize,
    pub squeeze: Conv,
    pub select: Vec<Conv>,
}

impl Skff {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<T>,
        channels: usize,
        branches: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        ensure!(branches >= 2, "skff needs at least two branches, got {branches}");
        let width = cfg.skff_width(channels);
        b.scope("skff", |b| {
            let squeeze = Conv::build(b, "squeeze", channels, width, 1)?;
            let select = (0..branches)
                .map(|i| Conv::build(b, &format!("select{i}"), width, channels, 1))
                .collect::<Result<_>>()?;
            Ok(Skff {
                channels,
                squeeze,
                select,
            })
        })
    }

    /// Fusion weights, shape `(n, branches·c, 1, 1)`, branch-major.
    pub fn weights<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, branches: &[&Var<T>]) -> Result<Var<T>> {
        ensure!(
            branches.len() == self.select.len(),
            "skff built for {} branches, got {}",
            self.select.len(),
            branches.len()
        );
        let shape = branches[0].shape();
        ensure!(
            shape.c == self.channels,
            "skff expects {} channels, got {}",
            self.channels,
            shape.c
        );
        for other in &branches[1..] {
            ensure!(
                other.shape() == shape,
                "skff branch shapes differ: {} vs {}",
                other.shape(),
                shape
            );
        }
        let mut total = branches[0].clone();
        for other in &branches[1..] {
            total = g.add(&total, other)?;
        }
        let descriptor = g.global_avg_pool(&total)?;
        let z = g.relu(&self.squeeze.forward(g, p, &descriptor)?);
        let logits = self
            .select
            .iter()
            .map(|conv| conv.forward(g, p, &z))
            .collect::<Result<Vec<_>>>()?;
        let logits = g.concat_channels(&logits.iter().collect::<Vec<_>>())?;
        g.softmax_over_branches(&logits, branches.len())
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, branches: &[&Var<T>]) -> Result<Var<T>> {
        let weights = self.weights(g, p, branches)?;
        let c = self.channels;
        let mut out: Option<Var<T>> = None;
        for (l, branch) in branches.iter().enumerate() {
            let w = g.slice_channels(&weights, l * c, c)?;
            let term = g.mul(branch, &w)?;
            out = Some(match out {
                None => term,
                Some(acc) => g.add(&acc, &term)?,
            });
        }
        Ok(out.expect("at least two branches"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn built<B>(f: impl FnOnce(&mut ParamBuilder<f64>) -> Result<B>) -> (B, ParamStore<f64>) {
        let mut b = ParamBuilder::new(7);
        let block = f(&mut b).unwrap();
        (block, b.finish())
    }

    fn zero_tensor(store: &mut ParamStore<f64>, id: ParamId) {
        let shape = store.get(id).shape();
        store.set(id, Tensor::zeros(shape)).unwrap();
    }

    #[test]
    fn channel_attention_zero_input() {
        let (ca, store) = built(|b| ChannelAttention::build(b, 16, 8));
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::zeros([1, 16, 4, 4]));
        assert_eq!(ca.forward(&g, &p, &x).unwrap().value(), &Tensor::zeros([1, 16, 4, 4]));
    }

    #[test]
    fn channel_attention_halves_with_zero_excite() {
        let (ca, mut store) = built(|b| ChannelAttention::build(b, 16, 8));
        zero_tensor(&mut store, ca.excite.weight);
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(random([2, 16, 4, 4], 1));
        let out = ca.forward(&g, &p, &x).unwrap();
        assert!(out.value().max_abs_diff(&x.value().map(|v| v / 2.0)) < 1e-15);
    }

    #[test]
    fn channel_attention_needs_enough_channels() {
        let mut b = ParamBuilder::<f32>::new(0);
        assert!(ChannelAttention::build(&mut b, 4, 8).is_err());
    }

    #[test]
    fn gates_in_open_unit_interval() {
        let (ca, store) = built(|b| ChannelAttention::build(b, 16, 8));
        let (sa, store2) = built(|b| SpatialAttention::build(b, 7));
        let g = Graph::new();
        let x = g.constant(random([2, 16, 9, 9], 2).map(|v| 3.0 * v));
        let gates = ca.gates(&g, &store.bind(&g), &x).unwrap();
        let map = sa.map(&g, &store2.bind(&g), &x).unwrap();
        for v in gates.value().data().iter().chain(map.value().data()) {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn spatial_attention_zero_conv() {
        let (sa, mut store) = built(|b| SpatialAttention::build(b, 7));
        zero_tensor(&mut store, sa.conv.weight);
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(random([1, 4, 6, 6], 3));
        let map = sa.map(&g, &p, &x).unwrap();
        assert!(map.value().data().iter().all(|&v| v == 0.5));
        let zero = g.constant(Tensor::zeros([1, 4, 6, 6]));
        assert_eq!(sa.forward(&g, &p, &zero).unwrap().value(), &Tensor::zeros([1, 4, 6, 6]));
    }

    #[test]
    fn spatial_attention_rejects_even_kernel() {
        let mut b = ParamBuilder::<f32>::new(0);
        assert!(SpatialAttention::build(&mut b, 6).is_err());
    }

    #[test]
    fn dau_zero_weights_pass_through() {
        let (dau, mut store) = built(|b| Dau::build(b, 16, &AttentionConfig::default()));
        store.zero_all();
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(random([1, 16, 8, 8], 4));
        assert_eq!(dau.forward(&g, &p, &x).unwrap().value(), x.value());
    }

    #[test]
    fn hwab_zero_weights_give_zero() {
        let (hwab, mut store) = built(|b| Hwab::build(b, 8, &AttentionConfig::default()));
        store.zero_all();
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(random([1, 8, 8, 8], 5));
        assert_eq!(hwab.forward(&g, &p, &x).unwrap().value(), &Tensor::zeros([1, 8, 8, 8]));
    }

    #[test]
    fn hwab_rejects_odd_shapes() {
        let mut b = ParamBuilder::<f64>::new(0);
        assert!(Hwab::build(&mut b, 7, &AttentionConfig::default()).is_err());
        let (hwab, store) = built(|b| Hwab::build(b, 8, &AttentionConfig::default()));
        let g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 8, 6, 7]));
        assert!(hwab.forward(&g, &store.bind(&g), &x).is_err());
    }

    #[test]
    fn skff_identical_branches_and_uniform_weights() {
        let cfg = AttentionConfig::default();
        let (skff, mut store) = built(|b| Skff::build(b, 8, 2, &cfg));
        let g = Graph::new();
        let p = store.bind(&g);
        let f = g.constant(random([2, 8, 5, 5], 6));
        let out = skff.forward(&g, &p, &[&f, &f]).unwrap();
        assert!(out.value().max_abs_diff(f.value()) < 1e-14);

        for conv in &skff.select {
            zero_tensor(&mut store, conv.weight);
        }
        let g = Graph::new();
        let p = store.bind(&g);
        let a = g.constant(random([1, 8, 5, 5], 7));
        let c = g.constant(random([1, 8, 5, 5], 8));
        let out = skff.forward(&g, &p, &[&a, &c]).unwrap();
        let mean = a.value().zip_map(c.value(), |x, y| (x + y) / 2.0);
        assert!(out.value().max_abs_diff(&mean) < 1e-15);
    }

    #[test]
    fn skff_weights_sum_to_one() {
        let cfg = AttentionConfig::default();
        let (skff, store) = built(|b| Skff::build(b, 16, 3, &cfg));
        let g = Graph::new();
        let p = store.bind(&g);
        let parts: Vec<_> = (0..3).map(|i| g.constant(random([2, 16, 4, 4], 10 + i))).collect();
        let refs: Vec<_> = parts.iter().collect();
        let w = skff.weights(&g, &p, &refs).unwrap();
        assert_eq!(w.shape(), Shape::new(2, 48, 1, 1));
        for n in 0..2 {
            for j in 0..16 {
                let total: f64 = (0..3).map(|l| w.value().at(n, l * 16 + j, 0, 0)).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn skff_rejects_mismatched_branches() {
        let cfg = AttentionConfig::default();
        let (skff, store) = built(|b| Skff::build(b, 8, 2, &cfg));
        let g = Graph::new();
        let a = g.constant(Tensor::zeros([1, 8, 4, 4]));
        let c = g.constant(Tensor::zeros([1, 8, 4, 2]));
        assert!(skff.forward(&g, &store.bind(&g), &[&a, &c]).is_err());
    }

    #[test]
    fn skff_descriptor_floor() {
        let cfg = AttentionConfig::default();
        assert_eq!(cfg.skff_width(8), 4);
        assert_eq!(cfg.skff_width(96), 12);
    }
}
