//! The full enhancement network: an M-Net+ encoder whose every level also
//! sees a bilinearly downsampled copy of the input (the gatepost path), an
//! SKFF-fused decoder, and a global residual output.
//!
//! ```text
//! g_i = gatepost(resize(y, H/2^(i-1), W/2^(i-1)))        shared 3x3 conv
//! e_1 = HWAB(g_1)
//! e_i = HWAB(merge_1x1([unshuffle(e_(i-1)), g_i]))        i = 2..levels
//! u_L = e_L
//! u_i = HWAB(SKFF([up_1x1(resize(u_(i+1), x2)), e_i]))    i = levels-1..1
//! out = y + conv3x3(u_1)
//! ```
//!
//! The output convolution starts at zero, so a freshly built network with the
//! global residual returns its input.
//!
//! Inputs of any size are reflect-padded on the bottom/right to a multiple of
//! `2^levels` and cropped back afterwards.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::blocks::{AttentionConfig, Conv, Hwab, Skff};
use crate::error::{ensure, invalid, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::resample::PadSpec;
use crate::tensor::{Scalar, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub levels: usize,
    /// Channels produced by the shared gatepost convolution at every scale.
    pub base_width: usize,
    /// Trunk channels per level, finest first.
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub attention: AttentionConfig,
    pub global_residual: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::doubling(4, 96)
    }
}

impl NetworkConfig {
    /// Trunk width doubles at every level: `[w, 2w, 4w, ...]`.
    pub fn doubling(levels: usize, base_width: usize) -> Self {
        NetworkConfig {
            levels,
            base_width,
            widths: (0..levels).map(|i| base_width << i).collect(),
            in_channels: 3,
            attention: AttentionConfig::default(),
            global_residual: true,
        }
    }

    /// Same trunk width at every level.
    pub fn constant(levels: usize, width: usize) -> Self {
        NetworkConfig {
            widths: vec![width; levels],
            ..Self::doubling(levels, width)
        }
    }

    /// Keys accepted by [`NetworkConfig::from_text`].
    pub const KEYS: &'static [&'static str] = &[
        "levels",
        "base_width",
        "widths",
        "in_channels",
        "ca_reduction",
        "sa_kernel",
        "skff_reduction",
        "skff_floor",
        "global_residual",
        "schedule",
    ];

    /// Spatial dims are padded to a multiple of this: the deepest level runs
    /// at `1/2^(levels-1)` scale and its HWAB halves once more.
    pub fn pad_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.levels >= 2, "levels must be at least 2, got {}", self.levels);
        ensure!(self.levels <= 8, "levels must be at most 8, got {}", self.levels);
        ensure!(self.in_channels >= 1, "in_channels must be positive");
        ensure!(
            self.widths.len() == self.levels,
            "width schedule has {} entries for {} levels",
            self.widths.len(),
            self.levels
        );
        ensure!(
            self.widths[0] == self.base_width,
            "finest width {} must equal base_width {} (the first HWAB consumes the gatepost output)",
            self.widths[0],
            self.base_width
        );
        for &w in &self.widths {
            ensure!(w % 2 == 0 && w >= 8, "every width must be even and at least 8, got {w}");
        }
        self.attention.validate()?;
        for &w in &self.widths {
            ensure!(
                2 * w >= self.attention.ca_reduction,
                "width {w} too small for channel reduction {}",
                self.attention.ca_reduction
            );
        }
        Ok(())
    }

    /// `key = value` lines; parsed back by [`NetworkConfig::from_text`].
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(ToString::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "levels = {}", self.levels);
        let _ = writeln!(s, "base_width = {}", self.base_width);
        let _ = writeln!(s, "widths = {}", widths.join(","));
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "ca_reduction = {}", self.attention.ca_reduction);
        let _ = writeln!(s, "sa_kernel = {}", self.attention.sa_kernel);
        let _ = writeln!(s, "skff_reduction = {}", self.attention.skff_reduction);
        let _ = writeln!(s, "skff_floor = {}", self.attention.skff_floor);
        let _ = writeln!(s, "global_residual = {}", self.global_residual);
        s
    }

    /// Parse `key = value` lines. Missing keys keep their defaults for the
    /// given `levels`/`base_width`; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_key_values(text)?;
        let get = |k: &str| map.get(k).map(String::as_str);
        let num = |k: &str| -> Result<Option<usize>> {
            get(k)
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|_| invalid!("config key {k}: {v:?} is not a count"))
                })
                .transpose()
        };
        for key in map.keys() {
            ensure!(Self::KEYS.contains(&key.as_str()), "unknown config key {key:?}");
        }
        let levels = num("levels")?.unwrap_or(4);
        let base = num("base_width")?.unwrap_or(96);
        let mut cfg = match get("schedule") {
            None | Some("doubling") => Self::doubling(levels, base),
            Some("constant") => Self::constant(levels, base),
            Some(other) => return Err(invalid!("unknown width schedule {other:?}")),
        };
        if let Some(w) = get("widths") {
            cfg.widths = w
                .split(',')
                .map(|p| p.trim().parse::<usize>().map_err(|_| invalid!("bad width list {w:?}")))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = num("in_channels")? {
            cfg.in_channels = v;
        }
        if let Some(v) = num("ca_reduction")? {
            cfg.attention.ca_reduction = v;
        }
        if let Some(v) = num("sa_kernel")? {
            cfg.attention.sa_kernel = v;
        }
        if let Some(v) = num("skff_reduction")? {
            cfg.attention.skff_reduction = v;
        }
        if let Some(v) = num("skff_floor")? {
            cfg.attention.skff_floor = v;
        }
        if let Some(v) = get("global_residual") {
            cfg.global_residual = v
                .parse()
                .map_err(|_| invalid!("global_residual must be true or false, got {v:?}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse `key = value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid!("line {}: expected key = value, got {line:?}", no + 1))?;
        let key = k.trim().to_string();
        ensure!(!map.contains_key(&key), "line {}: duplicate key {key:?}", no + 1);
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

/// Layer handles, a pure function of the configuration.
#[derive(Debug, Clone)]
pub struct Layout {
    pub gatepost: Conv,
    /// Channel merges feeding encoder levels 2..=levels.
    pub merges: Vec<Conv>,
    pub encoder: Vec<Hwab>,
    /// Decoder stages for levels `levels-1` down to 1, in that order.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv,
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub level: usize,
    pub up: Conv,
    pub skff: Skff,
    pub hwab: Hwab,
}

impl Layout {
    fn build<T: Scalar>(cfg: &NetworkConfig, b: &mut ParamBuilder<T>) -> Result<Self> {
        let att = &cfg.attention;
        let gatepost = b.scope("gatepost", |b| {
            Conv::build(b, "conv", cfg.in_channels, cfg.base_width, 3)
        })?;
        let mut merges = Vec::new();
        let mut encoder = Vec::new();
        for level in 1..=cfg.levels {
            let w = cfg.widths[level - 1];
            b.scope(&format!("enc.L{level}"), |b| {
                if level > 1 {
                    let cin = 4 * cfg.widths[level - 2] + cfg.base_width;
                    merges.push(Conv::build(b, "merge", cin, w, 1)?);
                }
                encoder.push(Hwab::build(b, w, att)?);
                Ok(())
            })?;
        }
        let mut decoder = Vec::new();
        for level in (1..cfg.levels).rev() {
            let w = cfg.widths[level - 1];
            let coarse = cfg.widths[level];
            decoder.push(b.scope(&format!("dec.L{level}"), |b| {
                Ok(DecoderStage {
                    level,
                    up: Conv::build(b, "up", coarse, w, 1)?,
                    skff: Skff::build(b, w, 2, att)?,
                    hwab: Hwab::build(b, w, att)?,
                })
            })?);
        }
        let head = b.scope("out", |b| {
            Conv::build_zeroed(b, "conv", cfg.widths[0], cfg.in_channels, 3)
        })?;
        Ok(Layout {
            gatepost,
            merges,
            encoder,
            decoder,
            head,
        })
    }
}

/// A built network: configuration, layer layout and parameters.
#[derive(Clone)]
pub struct HwmNet<T> {
    config: NetworkConfig,
    layout: Layout,
    params: ParamStore<T>,
}

impl<T: Scalar> HwmNet<T> {
    /// Build with parameters drawn deterministically from `seed`.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(seed);
        let layout = Layout::build(&config, &mut b)?;
        Ok(HwmNet {
            config,
            layout,
            params: b.finish(),
        })
    }

    /// Attach an existing parameter store; names and shapes must match the configuration.
    pub fn from_params(config: NetworkConfig, params: ParamStore<T>) -> Result<Self> {
        let template = Self::build(config, 0)?;
        ensure!(
            template.params.len() == params.len(),
            "parameter store has {} tensors, configuration needs {}",
            params.len(),
            template.params.len()
        );
        for ((tn, tt), (pn, pt)) in template.params.iter().zip(params.iter()) {
            ensure!(tn == pn, "parameter {pn:?} found where {tn:?} was expected");
            ensure!(
                tt.shape() == pt.shape(),
                "parameter {pn} has shape {}, configuration needs {}",
                pt.shape(),
                tt.shape()
            );
        }
        Ok(HwmNet {
            config: template.config,
            layout: template.layout,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn cast<U: Scalar>(&self) -> HwmNet<U> {
        HwmNet {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Forward pass on `graph` with parameters already bound to it.
    pub fn forward(&self, g: &Graph<T>, p: &Bound<T>, y: &Var<T>) -> Result<Var<T>> {
        let cfg = &self.config;
        let s = y.shape();
        ensure!(
            s.c == cfg.in_channels,
            "network expects {} input channels, got {}",
            cfg.in_channels,
            s.c
        );
        let pad = PadSpec::to_multiple(s.h, s.w, cfg.pad_multiple());
        ensure!(
            pad.bottom < s.h && pad.right < s.w,
            "input {}x{} too small: padding to a multiple of {} needs at least {} rows and columns",
            s.h,
            s.w,
            cfg.pad_multiple(),
            cfg.pad_multiple() / 2 + 1
        );
        let input = g.pad_reflect(y, pad)?;
        let (h, w) = (s.h + pad.bottom, s.w + pad.right);
        let l = &self.layout;

        let mut skips: Vec<Var<T>> = Vec::with_capacity(cfg.levels);
        for level in 1..=cfg.levels {
            let scale = 1 << (level - 1);
            let resized = g.bilinear_resize(&input, h / scale, w / scale)?;
            let gate = l.gatepost.forward(g, p, &resized)?;
            let trunk = match skips.last() {
                None => gate,
                Some(prev) => {
                    let down = g.pixel_unshuffle(prev, 2)?;
                    let cat = g.concat_channels(&[&down, &gate])?;
                    l.merges[level - 2].forward(g, p, &cat)?
                }
            };
            skips.push(l.encoder[level - 1].forward(g, p, &trunk)?);
        }

        let mut up_path = skips.pop().expect("levels >= 2");
        for stage in &l.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let sk = skip.shape();
            let resized = g.bilinear_resize(&up_path, sk.h, sk.w)?;
            let up = stage.up.forward(g, p, &resized)?;
            let fused = stage.skff.forward(g, p, &[&up, &skip])?;
            up_path = stage.hwab.forward(g, p, &fused)?;
        }

        let correction = l.head.forward(g, p, &up_path)?;
        let out = if cfg.global_residual {
            g.add(&input, &correction)?
        } else {
            correction
        };
        g.crop(&out, pad)
    }

    /// Inference without a tape.
    pub fn infer(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::inference();
        let p = self.params.bind(&g);
        let y = g.constant(y.clone());
        Ok(self.forward(&g, &p, &y)?.to_tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_text_round_trip() {
        let cfg = NetworkConfig::constant(3, 16);
        assert_eq!(NetworkConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let d = NetworkConfig::default();
        assert_eq!(NetworkConfig::from_text(&d.to_text()).unwrap(), d);
        assert_eq!(NetworkConfig::from_text("").unwrap(), d);
        let c = NetworkConfig::from_text("levels = 3\nbase_width = 16\nschedule = constant\n").unwrap();
        assert_eq!(c, cfg);
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(NetworkConfig::constant(3, 7).validate().is_err());
        assert!(NetworkConfig::constant(1, 8).validate().is_err());
        assert!(NetworkConfig::from_text("depth = 3").is_err());
        assert!(NetworkConfig::from_text("levels = three").is_err());
        assert!(NetworkConfig::from_text("levels").is_err());
        let mut c = NetworkConfig::constant(3, 16);
        c.widths[0] = 32;
        assert!(c.validate().is_err());
    }

    #[test]
    fn odd_width_build_rejected() {
        assert!(HwmNet::<f32>::build(NetworkConfig::constant(4, 7), 0).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = NetworkConfig::constant(3, 8);
        let a = HwmNet::<f32>::build(cfg.clone(), 42).unwrap();
        let b = HwmNet::<f32>::build(cfg.clone(), 42).unwrap();
        let c = HwmNet::<f32>::build(cfg, 43).unwrap();
        assert!(a.params().bitwise_eq(b.params()));
        assert!(!a.params().bitwise_eq(c.params()));
    }

    #[test]
    fn parameter_names_are_hierarchical() {
        let net = HwmNet::<f32>::build(NetworkConfig::constant(3, 8), 0).unwrap();
        for name in [
            "gatepost.conv.weight",
            "enc.L1.hwab.dau.ca.fc1.weight",
            "enc.L2.merge.weight",
            "enc.L3.hwab.shortcut.bias",
            "dec.L2.skff.select1.weight",
            "dec.L1.hwab.act.alpha",
            "out.conv.weight",
        ] {
            assert!(net.params().id_of(name).is_some(), "{name}");
        }
        assert!(net.params().id_of("dec.L3.up.weight").is_none());
    }

    #[test]
    fn shape_preserved_with_padding() {
        let net = HwmNet::<f32>::build(NetworkConfig::constant(3, 8), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (h, w) in [(16, 16), (20, 27), (9, 33)] {
            let y = Tensor::uniform([1, 3, h, w], 0.0, 1.0, &mut rng);
            let out = net.infer(&y).unwrap();
            assert_eq!(out.shape(), y.shape());
            assert!(out.all_finite());
        }
    }

    #[test]
    fn fresh_network_is_identity() {
        let net = HwmNet::<f64>::build(NetworkConfig::constant(3, 8), 5).unwrap();
        let y = Tensor::uniform([1, 3, 16, 24], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(net.infer(&y).unwrap(), y);
    }

    #[test]
    fn zero_params_identity() {
        let mut net = HwmNet::<f32>::build(NetworkConfig::constant(3, 8), 1).unwrap();
        net.params_mut().zero_all();
        let y = Tensor::uniform([2, 3, 24, 40], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(net.infer(&y).unwrap(), y);
    }

    #[test]
    fn wrong_channels_rejected() {
        let net = HwmNet::<f32>::build(NetworkConfig::constant(3, 8), 1).unwrap();
        assert!(net.infer(&Tensor::zeros([1, 1, 16, 16])).is_err());
    }

    #[test]
    fn from_params_checks_layout() {
        let a = HwmNet::<f32>::build(NetworkConfig::constant(3, 8), 1).unwrap();
        let ok = HwmNet::from_params(NetworkConfig::constant(3, 8), a.params().clone());
        assert!(ok.is_ok());
        let bad = HwmNet::from_params(NetworkConfig::constant(3, 16), a.params().clone());
        assert!(bad.is_err());
    }
}
