//! Parameter and FLOP accounting by walking layer shapes, without building
//! the network.
//!
//! Convolutions cost `2·k²·c_in·c_out·h·w` (one multiply-accumulate is two
//! FLOPs, bias adds are not counted). Everything else is linear in its
//! element count:
//!
//! | op | FLOPs |
//! |---|---|
//! | activation, sigmoid, add, multiply | 1 per output element |
//! | global average pool, channel mean, channel max | 1 per input element |
//! | bilinear resize | 7 per output element (4 multiplies, 3 adds) |
//! | Haar DWT / IWT | 4 per output element |
//! | softmax | 3 per element |
//! | split, concat, pixel (un)shuffle, pad, crop | 0 |

use std::fmt;

use crate::blocks::AttentionConfig;
use crate::error::{ensure, Result};
use crate::model::NetworkConfig;
use crate::resample::PadSpec;

pub const BILINEAR_FLOPS: u64 = 7;
pub const WAVELET_FLOPS: u64 = 4;
pub const SOFTMAX_FLOPS: u64 = 3;

/// `2·k²·c_in·c_out·h·w`.
pub fn conv_flops(k: usize, cin: usize, cout: usize, h: usize, w: usize) -> u64 {
    2 * (k * k * cin * cout) as u64 * (h * w) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Conv { k: usize, cin: usize, cout: usize },
    Activation,
    Add,
    Mul,
    Pool,
    Resize,
    Wavelet,
    Softmax,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Conv { k, cin, cout } => write!(f, "conv{k}x{k} {cin}->{cout}"),
            OpKind::Activation => f.write_str("activation"),
            OpKind::Add => f.write_str("add"),
            OpKind::Mul => f.write_str("mul"),
            OpKind::Pool => f.write_str("pool"),
            OpKind::Resize => f.write_str("resize"),
            OpKind::Wavelet => f.write_str("wavelet"),
            OpKind::Softmax => f.write_str("softmax"),
        }
    }
}

/// One counted operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostEntry {
    pub name: String,
    pub kind: OpKind,
    /// Learnable scalars owned by this entry. A layer applied more than once
    /// (the shared gatepost convolution) owns its parameters only at the
    /// first application.
    pub params: u64,
    pub flops: u64,
    /// False for ops on pooled `(n, c, 1, 1)` descriptors, whose cost does
    /// not grow with the image.
    pub spatial: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    /// Image size the report was computed for, before padding.
    pub input: (usize, usize),
    /// Size after reflect padding.
    pub padded: (usize, usize),
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    /// Totals grouped by the first `depth` dot-separated name components, in
    /// first-appearance order.
    pub fn grouped(&self, depth: usize) -> Vec<(String, u64, u64)> {
        let mut out: Vec<(String, u64, u64)> = Vec::new();
        for e in &self.entries {
            let key = e.name.split(['.', '@']).take(depth).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|(k, _, _)| *k == key) {
                Some(slot) => {
                    slot.1 += e.params;
                    slot.2 += e.flops;
                }
                None => out.push((key, e.params, e.flops)),
            }
        }
        out
    }

    pub fn entry(&self, name: &str) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "input {}x{} (padded {}x{})",
            self.input.0, self.input.1, self.padded.0, self.padded.1
        )?;
        writeln!(f, "{:<16} {:>12} {:>18}", "layer", "params", "flops")?;
        for (name, params, flops) in self.grouped(2) {
            writeln!(f, "{name:<16} {params:>12} {flops:>18}")?;
        }
        writeln!(f, "{:<16} {:>12} {:>18}", "total", self.params(), self.flops())?;
        write!(
            f,
            "total flops {:.4e} ({:.3} T)",
            self.flops() as f64,
            self.flops() as f64 / 1e12
        )
    }
}

struct Walker<'a> {
    att: &'a AttentionConfig,
    prefix: Vec<String>,
    entries: Vec<CostEntry>,
}

impl Walker<'_> {
    fn name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    fn scoped(&mut self, name: &str, f: impl FnOnce(&mut Self)) {
        self.prefix.push(name.to_string());
        f(self);
        self.prefix.pop();
    }

    fn push(&mut self, leaf: &str, kind: OpKind, params: u64, flops: u64, spatial: bool) {
        let name = self.name(leaf);
        self.entries.push(CostEntry {
            name,
            kind,
            params,
            flops,
            spatial,
        });
    }

    fn conv(&mut self, leaf: &str, k: usize, cin: usize, cout: usize, h: usize, w: usize) {
        self.conv_shared(leaf, k, cin, cout, h, w, true);
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_shared(&mut self, leaf: &str, k: usize, cin: usize, cout: usize, h: usize, w: usize, owns: bool) {
        let params = if owns { (k * k * cin * cout + cout) as u64 } else { 0 };
        self.push(
            leaf,
            OpKind::Conv { k, cin, cout },
            params,
            conv_flops(k, cin, cout, h, w),
            true,
        );
    }

    /// 1x1 convolution on a pooled `(c, 1, 1)` descriptor.
    fn descriptor_conv(&mut self, leaf: &str, cin: usize, cout: usize) {
        let params = (cin * cout + cout) as u64;
        self.push(
            leaf,
            OpKind::Conv { k: 1, cin, cout },
            params,
            conv_flops(1, cin, cout, 1, 1),
            false,
        );
    }

    fn linear(&mut self, leaf: &str, kind: OpKind, per: u64, elems: usize, spatial: bool) {
        self.push(leaf, kind, 0, per * elems as u64, spatial);
    }

    fn prelu(&mut self, leaf: &str, c: usize, h: usize, w: usize) {
        self.push(leaf, OpKind::Activation, c as u64, (c * h * w) as u64, true);
    }

    fn channel_attention(&mut self, c: usize, h: usize, w: usize) {
        let hidden = c / self.att.ca_reduction;
        self.scoped("ca", |s| {
            s.linear("pool", OpKind::Pool, 1, c * h * w, true);
            s.descriptor_conv("fc1", c, hidden);
            s.linear("relu", OpKind::Activation, 1, hidden, false);
            s.descriptor_conv("fc2", hidden, c);
            s.linear("sigmoid", OpKind::Activation, 1, c, false);
            s.linear("gate", OpKind::Mul, 1, c * h * w, true);
        });
    }

    fn spatial_attention(&mut self, c: usize, h: usize, w: usize) {
        let k = self.att.sa_kernel;
        self.scoped("sa", |s| {
            s.linear("mean", OpKind::Pool, 1, c * h * w, true);
            s.linear("max", OpKind::Pool, 1, c * h * w, true);
            s.conv("conv", k, 2, 1, h, w);
            s.linear("sigmoid", OpKind::Activation, 1, h * w, true);
            s.linear("gate", OpKind::Mul, 1, c * h * w, true);
        });
    }

    fn dau(&mut self, c: usize, h: usize, w: usize) {
        self.scoped("dau", |s| {
            s.conv("body1", 3, c, c, h, w);
            s.prelu("act", c, h, w);
            s.conv("body2", 3, c, c, h, w);
            s.channel_attention(c, h, w);
            s.spatial_attention(c, h, w);
            s.conv("merge", 1, 2 * c, c, h, w);
            s.linear("residual", OpKind::Add, 1, c * h * w, true);
        });
    }

    fn hwab(&mut self, c: usize, h: usize, w: usize) {
        self.scoped("hwab", |s| {
            let half = c / 2;
            s.linear("dwt", OpKind::Wavelet, WAVELET_FLOPS, half * h * w, true);
            s.dau(2 * c, h / 2, w / 2);
            s.linear("iwt", OpKind::Wavelet, WAVELET_FLOPS, half * h * w, true);
            s.conv("fuse", 3, c, c, h, w);
            s.prelu("act", c, h, w);
            s.conv("shortcut", 1, c, c, h, w);
            s.linear("residual", OpKind::Add, 1, c * h * w, true);
        });
    }

    fn skff(&mut self, c: usize, branches: usize, h: usize, w: usize) {
        let width = self.att.skff_width(c);
        self.scoped("skff", |s| {
            s.linear("sum", OpKind::Add, 1, (branches - 1) * c * h * w, true);
            s.linear("pool", OpKind::Pool, 1, c * h * w, true);
            s.descriptor_conv("squeeze", c, width);
            s.linear("relu", OpKind::Activation, 1, width, false);
            for i in 0..branches {
                s.descriptor_conv(&format!("select{i}"), width, c);
            }
            s.linear("softmax", OpKind::Softmax, SOFTMAX_FLOPS, branches * c, false);
            s.linear("weight", OpKind::Mul, 1, branches * c * h * w, true);
            s.linear("sum_out", OpKind::Add, 1, (branches - 1) * c * h * w, true);
        });
    }
}

/// Count parameters and FLOPs of one forward pass on a single `h×w` image.
pub fn count_cost(config: &NetworkConfig, h: usize, w: usize) -> Result<CostReport> {
    config.validate()?;
    ensure!(h > 0 && w > 0, "image size must be positive, got {h}x{w}");
    let pad = PadSpec::to_multiple(h, w, config.pad_multiple());
    let (ph, pw) = (h + pad.bottom, w + pad.right);
    let cin = config.in_channels;
    let base = config.base_width;
    let widths = &config.widths;
    let mut s = Walker {
        att: &config.attention,
        prefix: Vec::new(),
        entries: Vec::new(),
    };

    for level in 1..=config.levels {
        let (lh, lw) = (ph >> (level - 1), pw >> (level - 1));
        s.scoped(&format!("enc.L{level}"), |s| {
            if level > 1 {
                s.linear("resize", OpKind::Resize, BILINEAR_FLOPS, cin * lh * lw, true);
            }
            s.conv_shared("gatepost", 3, cin, base, lh, lw, level == 1);
            if level > 1 {
                s.conv("merge", 1, 4 * widths[level - 2] + base, widths[level - 1], lh, lw);
            }
            s.hwab(widths[level - 1], lh, lw);
        });
    }
    for level in (1..config.levels).rev() {
        let (lh, lw) = (ph >> (level - 1), pw >> (level - 1));
        let c = widths[level - 1];
        s.scoped(&format!("dec.L{level}"), |s| {
            s.linear("resize", OpKind::Resize, BILINEAR_FLOPS, widths[level] * lh * lw, true);
            s.conv("up", 1, widths[level], c, lh, lw);
            s.skff(c, 2, lh, lw);
            s.hwab(c, lh, lw);
        });
    }
    s.scoped("out", |s| {
        s.conv("conv", 3, widths[0], cin, ph, pw);
        if config.global_residual {
            s.linear("residual", OpKind::Add, 1, cin * ph * pw, true);
        }
    });

    Ok(CostReport {
        input: (h, w),
        padded: (ph, pw),
        entries: s.entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_closed_forms() {
        assert_eq!(conv_flops(3, 96, 96, 400, 592), 39_282_278_400);
        assert_eq!(conv_flops(1, 10, 10, 7, 9), 2 * 100 * 63);
    }

    #[test]
    fn total_is_sum_of_entries() {
        let r = count_cost(&NetworkConfig::constant(3, 16), 64, 48).unwrap();
        let by_group: u64 = r.grouped(1).iter().map(|g| g.2).sum();
        assert_eq!(by_group, r.flops());
        assert_eq!(r.grouped(0).len(), 1);
    }

    #[test]
    fn gatepost_params_counted_once() {
        let r = count_cost(&NetworkConfig::constant(3, 16), 64, 64).unwrap();
        assert_eq!(r.entry("enc.L1.gatepost").unwrap().params, 3 * 3 * 3 * 16 + 16);
        assert_eq!(r.entry("enc.L2.gatepost").unwrap().params, 0);
        assert_eq!(r.entry("enc.L2.gatepost").unwrap().flops, conv_flops(3, 3, 16, 32, 32));
    }

    #[test]
    fn params_agree_with_built_network() {
        use crate::model::HwmNet;
        for cfg in [
            NetworkConfig::constant(3, 8),
            NetworkConfig::doubling(3, 16),
            NetworkConfig::constant(2, 32),
        ] {
            let net = HwmNet::<f32>::build(cfg.clone(), 0).unwrap();
            let r = count_cost(&cfg, 32, 32).unwrap();
            assert_eq!(r.params(), net.num_params() as u64);
        }
    }

    #[test]
    fn padding_is_reported() {
        let r = count_cost(&NetworkConfig::constant(3, 16), 100, 150).unwrap();
        assert_eq!(r.padded, (104, 152));
    }
}
