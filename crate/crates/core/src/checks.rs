//! Built-in verification runs: the double-precision gradient suite and a
//! quick self-check of closed-form properties.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{AttentionConfig, ChannelAttention, Dau, Hwab, Skff, SpatialAttention};
use crate::error::Result;
use crate::gradcheck::GradCheck;
use crate::graph::{Graph, Var};
use crate::metrics::{psnr, ssim};
use crate::model::{HwmNet, NetworkConfig};
use crate::ops::{LossMode, CHARBONNIER_EPS};
use crate::params::{Bound, ParamBuilder};
use crate::resample::{self, PadSpec};
use crate::tensor::Tensor;
use crate::train::cosine_lr;

/// Relative-error bound for primitives and blocks.
pub const BLOCK_TOLERANCE: f64 = 1e-5;
/// Relative-error bound for the whole network.
pub const NETWORK_TOLERANCE: f64 = 1e-4;

/// At most this fraction of probes may be set aside as kink straddles.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.01;

/// Result of one gradient check.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub probes: usize,
    /// Probes whose stencil still straddled a kink at the smallest step.
    pub excluded: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance && self.excluded as f64 <= MAX_EXCLUDED_FRACTION * self.probes as f64
    }
}

type Objective = Box<dyn Fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>>;

/// One named gradient check: inputs and the function differentiated.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub objective: Objective,
    pub probes: Option<usize>,
    pub tolerance: f64,
}

impl GradCase {
    pub fn run(&self) -> Result<SuiteEntry> {
        let check = GradCheck {
            eps: 1e-5,
            max_probes: self.probes,
            kink_threshold: Some(self.tolerance),
        };
        let report = check.run(&self.inputs, |g, v| (self.objective)(g, v))?;
        Ok(SuiteEntry {
            name: self.name.to_string(),
            max_error: report.max_error(),
            tolerance: self.tolerance,
            probes: report.probes,
            excluded: report.excluded.len(),
        })
    }
}

fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `Σ w ⊙ out` with fixed random `w`, so every output element matters.
fn project(g: &Graph<f64>, out: &Var<f64>) -> Result<Var<f64>> {
    let w = g.constant(random(out.shape().dims(), 0xFEED));
    Ok(g.sum(&g.mul(out, &w)?))
}

fn case<F>(name: &'static str, inputs: Vec<Tensor<f64>>, f: F) -> GradCase
where
    F: Fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'static,
{
    GradCase {
        name,
        inputs,
        objective: Box::new(move |g, v| {
            let out = f(g, v)?;
            project(g, &out)
        }),
        probes: None,
        tolerance: BLOCK_TOLERANCE,
    }
}

fn block_case<B: 'static>(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: impl FnOnce(&mut ParamBuilder<f64>) -> Result<B>,
    forward: impl Fn(&B, &Graph<f64>, &Bound<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'static,
) -> Result<GradCase> {
    let mut b = ParamBuilder::new(7);
    let block = build(&mut b)?;
    let store = b.finish();
    let n_data = inputs.len();
    let mut all = inputs;
    all.extend(store.iter().map(|(_, t)| t.clone()));
    Ok(GradCase {
        name,
        inputs: all,
        objective: Box::new(move |g, v| {
            let bound = Bound::from_vars(v[n_data..].to_vec());
            let out = forward(&block, g, &bound, &v[..n_data])?;
            project(g, &out)
        }),
        probes: None,
        tolerance: BLOCK_TOLERANCE,
    })
}

/// Every differentiable primitive.
pub fn primitive_cases() -> Vec<GradCase> {
    let pad = PadSpec::new(2, 3);
    vec![
        case(
            "conv2d 3x3",
            vec![
                random([2, 3, 6, 7], 1),
                random([4, 3, 3, 3], 2),
                random([1, 4, 1, 1], 3),
            ],
            |g, v| g.conv2d(&v[0], &v[1], Some(&v[2]), 1, 1),
        ),
        case(
            "conv2d 1x1",
            vec![random([1, 5, 4, 3], 4), random([3, 5, 1, 1], 5)],
            |g, v| g.conv2d(&v[0], &v[1], None, 0, 1),
        ),
        case(
            "conv2d 5x5 unpadded",
            vec![random([1, 2, 7, 8], 6), random([2, 2, 5, 5], 7)],
            |g, v| g.conv2d(&v[0], &v[1], None, 0, 1),
        ),
        case(
            "conv2d grouped",
            vec![random([1, 4, 5, 5], 8), random([6, 2, 3, 3], 9)],
            |g, v| g.conv2d(&v[0], &v[1], None, 1, 2),
        ),
        case("relu", vec![random([2, 3, 4, 5], 10)], |g, v| Ok(g.relu(&v[0]))),
        case("sigmoid", vec![random([2, 3, 4, 5], 11)], |g, v| Ok(g.sigmoid(&v[0]))),
        case(
            "prelu",
            vec![random([2, 3, 4, 5], 12), random([1, 3, 1, 1], 13)],
            |g, v| g.prelu(&v[0], &v[1]),
        ),
        case(
            "add broadcast",
            vec![random([2, 3, 4, 5], 14), random([2, 3, 1, 1], 15)],
            |g, v| g.add(&v[0], &v[1]),
        ),
        case(
            "sub",
            vec![random([2, 3, 4, 5], 16), random([2, 3, 4, 5], 17)],
            |g, v| g.sub(&v[0], &v[1]),
        ),
        case(
            "mul broadcast",
            vec![random([2, 3, 4, 5], 18), random([2, 1, 4, 5], 19)],
            |g, v| g.mul(&v[0], &v[1]),
        ),
        case(
            "scale",
            vec![random([1, 2, 3, 3], 20)],
            |g, v| Ok(g.scale(&v[0], -1.75)),
        ),
        case("mean", vec![random([2, 3, 4, 5], 21)], |g, v| Ok(g.mean(&v[0]))),
        case("global_avg_pool", vec![random([2, 3, 4, 5], 22)], |g, v| {
            g.global_avg_pool(&v[0])
        }),
        case("channel_mean", vec![random([2, 5, 3, 4], 23)], |g, v| {
            g.channel_mean(&v[0])
        }),
        case("channel_max", vec![random([2, 5, 3, 4], 24)], |g, v| {
            g.channel_max(&v[0])
        }),
        case(
            "concat_channels",
            vec![random([1, 2, 3, 3], 25), random([1, 3, 3, 3], 26)],
            |g, v| g.concat_channels(&[&v[0], &v[1]]),
        ),
        case("slice_channels", vec![random([2, 6, 3, 3], 27)], |g, v| {
            g.slice_channels(&v[0], 2, 3)
        }),
        case("softmax_over_branches", vec![random([2, 9, 1, 1], 28)], |g, v| {
            g.softmax_over_branches(&v[0], 3)
        }),
        case("dwt_haar", vec![random([2, 3, 6, 8], 29)], |g, v| g.dwt_haar(&v[0])),
        case("iwt_haar", vec![random([2, 8, 3, 4], 30)], |g, v| g.iwt_haar(&v[0])),
        case("pixel_unshuffle", vec![random([1, 2, 6, 4], 31)], |g, v| {
            g.pixel_unshuffle(&v[0], 2)
        }),
        case("pixel_shuffle", vec![random([1, 8, 3, 2], 32)], |g, v| {
            g.pixel_shuffle(&v[0], 2)
        }),
        case("bilinear up", vec![random([1, 2, 5, 6], 33)], |g, v| {
            g.bilinear_resize(&v[0], 10, 12)
        }),
        case("bilinear down", vec![random([1, 2, 8, 8], 34)], |g, v| {
            g.bilinear_resize(&v[0], 4, 4)
        }),
        case("bilinear uneven", vec![random([1, 2, 7, 5], 35)], |g, v| {
            g.bilinear_resize(&v[0], 3, 9)
        }),
        case("pad_reflect", vec![random([1, 2, 5, 6], 36)], move |g, v| {
            g.pad_reflect(&v[0], pad)
        }),
        case("crop", vec![random([1, 2, 7, 9], 37)], move |g, v| g.crop(&v[0], pad)),
        GradCase {
            name: "charbonnier mean",
            inputs: vec![random([2, 3, 4, 4], 38), random([2, 3, 4, 4], 39)],
            objective: Box::new(|g, v| g.charbonnier(&v[0], &v[1], CHARBONNIER_EPS, LossMode::ElementwiseMean)),
            probes: None,
            tolerance: BLOCK_TOLERANCE,
        },
        GradCase {
            name: "charbonnier global",
            inputs: vec![random([2, 3, 4, 4], 40), random([2, 3, 4, 4], 41)],
            objective: Box::new(|g, v| g.charbonnier(&v[0], &v[1], CHARBONNIER_EPS, LossMode::GlobalNorm)),
            probes: None,
            tolerance: BLOCK_TOLERANCE,
        },
    ]
}

/// Channel attention, spatial attention, DAU, HWAB and SKFF with their parameters.
pub fn block_cases() -> Result<Vec<GradCase>> {
    let att = AttentionConfig::default();
    Ok(vec![
        block_case(
            "channel attention",
            vec![random([2, 16, 5, 5], 50)],
            |b| ChannelAttention::build(b, 16, att.ca_reduction),
            |blk, g, p, v| blk.forward(g, p, &v[0]),
        )?,
        block_case(
            "spatial attention",
            vec![random([2, 6, 6, 5], 51)],
            |b| SpatialAttention::build(b, att.sa_kernel),
            |blk, g, p, v| blk.forward(g, p, &v[0]),
        )?,
        block_case(
            "dau",
            vec![random([1, 8, 8, 8], 52)],
            |b| Dau::build(b, 8, &att),
            |blk, g, p, v| blk.forward(g, p, &v[0]),
        )?,
        block_case(
            "hwab",
            vec![random([1, 8, 16, 16], 53)],
            |b| Hwab::build(b, 8, &att),
            |blk, g, p, v| blk.forward(g, p, &v[0]),
        )?,
        block_case(
            "skff",
            vec![random([2, 8, 5, 5], 54), random([2, 8, 5, 5], 55)],
            |b| Skff::build(b, 8, 2, &att),
            |blk, g, p, v| blk.forward(g, p, &[&v[0], &v[1]]),
        )?,
    ])
}

/// Charbonnier loss of the tiny network (levels 3, width 8) on a 16×16
/// input, differentiated with respect to the input and every parameter
/// tensor. The zero-initialized output convolution is randomized first so
/// gradients reach the whole network.
pub fn network_case() -> Result<GradCase> {
    let mut net = HwmNet::<f64>::build(NetworkConfig::constant(3, 8), 11)?;
    let head = net.params().id_of("out.conv.weight").expect("output conv exists");
    let shape = net.params().get(head).shape();
    net.params_mut().set(
        head,
        Tensor::uniform(shape, -0.2, 0.2, &mut ChaCha8Rng::seed_from_u64(12)),
    )?;
    let x = Tensor::uniform([1, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(13));
    let target = Tensor::uniform([1, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(14));
    let mut inputs = vec![x];
    inputs.extend(net.params().iter().map(|(_, t)| t.clone()));
    Ok(GradCase {
        name: "network end-to-end",
        inputs,
        objective: Box::new(move |g, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            let out = net.forward(g, &bound, &v[0])?;
            let t = g.constant(target.clone());
            g.charbonnier(&out, &t, CHARBONNIER_EPS, LossMode::ElementwiseMean)
        }),
        probes: Some(6),
        tolerance: NETWORK_TOLERANCE,
    })
}

/// Run every case: primitives, blocks, then the network.
pub fn gradient_suite() -> Result<Vec<SuiteEntry>> {
    let mut cases = primitive_cases();
    cases.extend(block_cases()?);
    cases.push(network_case()?);
    cases.iter().map(GradCase::run).collect()
}

/// One self-check outcome.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

/// Fast closed-form checks: wavelet reconstruction and energy, shuffle
/// round trip, zero-parameter identity, metric and loss values, schedule endpoints.
pub fn self_check() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    let mut recon64: f64 = 0.0;
    let mut recon32: f64 = 0.0;
    let mut energy: f64 = 0.0;
    for _ in 0..20 {
        let x = Tensor::<f64>::uniform([2, 3, 8, 10], -1.0, 1.0, &mut rng);
        let y = resample::dwt_haar(&x)?;
        recon64 = recon64.max(resample::iwt_haar(&y)?.max_abs_diff(&x));
        energy = energy.max((y.norm() - x.norm()).abs() / x.norm());
        let x32: Tensor<f32> = x.cast();
        recon32 = recon32.max(resample::iwt_haar(&resample::dwt_haar(&x32)?)?.max_abs_diff(&x32));
    }
    out.push(outcome(
        "wavelet reconstruction",
        recon64 < 1e-12 && recon32 < 1e-5,
        format!("max error {recon64:.2e} (double), {recon32:.2e} (single)"),
    ));
    out.push(outcome(
        "wavelet energy",
        energy < 1e-5,
        format!("max relative change {energy:.2e}"),
    ));

    let x = Tensor::<f32>::uniform([1, 3, 8, 12], 0.0, 1.0, &mut rng);
    let back = resample::pixel_shuffle(&resample::pixel_unshuffle(&x, 2)?, 2)?;
    out.push(outcome(
        "pixel shuffle round trip",
        back == x,
        "unshuffle then shuffle, r = 2".into(),
    ));

    let mut net = HwmNet::<f32>::build(NetworkConfig::constant(3, 8), 0)?;
    net.params_mut().zero_all();
    let y = Tensor::<f32>::uniform([1, 3, 20, 28], 0.0, 1.0, &mut rng);
    out.push(outcome(
        "zero-parameter identity",
        net.infer(&y)? == y,
        "all-zero weights with the global residual".into(),
    ));

    let a = Tensor::<f64>::full([1, 3, 16, 16], 0.25);
    let b = Tensor::<f64>::full([1, 3, 16, 16], 0.75);
    let p = psnr(&a, &b, 1.0)?;
    out.push(outcome(
        "psnr of 0.5 difference",
        (p - 6.0206).abs() < 1e-3,
        format!("{p:.4} dB"),
    ));
    let s = ssim(&a, &b)?;
    out.push(outcome(
        "ssim of 0.25 vs 0.75",
        (s - 0.6).abs() < 1e-3,
        format!("{s:.4}"),
    ));
    let s_self = ssim(&y, &y)?;
    out.push(outcome("ssim self-similarity", s_self == 1.0, format!("{s_self}")));

    let g = Graph::<f64>::inference();
    let t = g.constant(b.clone());
    let l0 = g
        .charbonnier(&t, &t, CHARBONNIER_EPS, LossMode::ElementwiseMean)?
        .scalar()?;
    let l1 = g.charbonnier(&t, &t, CHARBONNIER_EPS, LossMode::GlobalNorm)?.scalar()?;
    out.push(outcome(
        "charbonnier of identical tensors",
        l0 == CHARBONNIER_EPS && l1 == CHARBONNIER_EPS,
        format!("{l0:e} (mean), {l1:e} (global)"),
    ));

    let (lr0, lr_t) = (
        cosine_lr(0, 100_000, 1e-4, 1e-6),
        cosine_lr(100_000, 100_000, 1e-4, 1e-6),
    );
    out.push(outcome(
        "cosine schedule endpoints",
        lr0 == 1e-4 && lr_t == 1e-6,
        format!("{lr0:e} -> {lr_t:e}"),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_check_passes() {
        for o in self_check().unwrap() {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }
}
