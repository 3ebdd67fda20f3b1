//! Randomized invariants over shapes and values.

use hwmnet::cost::count_cost;
use hwmnet::data::{flip_horizontal, flip_vertical};
use hwmnet::metrics::{psnr, ssim};
use hwmnet::ops::{LossMode, CHARBONNIER_EPS};
use hwmnet::resample::{crop, dwt_haar, iwt_haar, pad_reflect, pixel_shuffle, pixel_unshuffle, PadSpec};
use hwmnet::{Graph, HwmNet, NetworkConfig, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn image(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn wavelet_round_trip(n in 1usize..3, c in 1usize..5, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let x = random([n, c, 2 * h, 2 * w], seed);
        let y = dwt_haar(&x).unwrap();
        prop_assert_eq!(y.shape().c, 4 * c);
        prop_assert!(iwt_haar(&y).unwrap().max_abs_diff(&x) < 1e-12);
        prop_assert!((y.norm() - x.norm()).abs() <= 1e-12 * x.norm().max(1.0));
    }

    #[test]
    fn wavelet_rejects_odd(h in 1usize..6, w in 1usize..6) {
        let x = Tensor::<f64>::zeros([1, 1, 2 * h + 1, 2 * w]);
        prop_assert!(dwt_haar(&x).is_err());
    }

    #[test]
    fn shuffle_round_trip_is_bitwise(c in 1usize..4, h in 1usize..6, w in 1usize..6, r in 1usize..4, seed in any::<u64>()) {
        let x = random([1, c, h * r, w * r], seed);
        let down = pixel_unshuffle(&x, r).unwrap();
        prop_assert_eq!(down.shape().c, c * r * r);
        prop_assert_eq!(pixel_shuffle(&down, r).unwrap(), x);
    }

    #[test]
    fn pad_then_crop_is_exact(h in 2usize..20, w in 2usize..20, m in 1usize..5, seed in any::<u64>()) {
        let x = random([1, 2, h, w], seed);
        let spec = PadSpec::to_multiple(h, w, 1 << m);
        prop_assume!(spec.bottom < h && spec.right < w);
        let padded = pad_reflect(&x, spec).unwrap();
        prop_assert_eq!(padded.shape().h % (1 << m), 0);
        prop_assert_eq!(padded.shape().w % (1 << m), 0);
        prop_assert_eq!(crop(&padded, spec).unwrap(), x);
    }

    #[test]
    fn flips_are_involutions(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let x = random([2, 3, h, w], seed);
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&x)), x.clone());
        prop_assert_eq!(flip_vertical(&flip_vertical(&x)), x.clone());
        prop_assert_eq!(flip_vertical(&flip_horizontal(&x)), flip_horizontal(&flip_vertical(&x)));
    }

    #[test]
    fn metrics_symmetric_and_flip_invariant(h in 11usize..20, w in 11usize..20, seed in any::<u64>()) {
        let a = image([1, 3, h, w], seed);
        let b = image([1, 3, h, w], seed ^ 1);
        let p = psnr(&a, &b, 1.0).unwrap();
        prop_assert!((p - psnr(&b, &a, 1.0).unwrap()).abs() < 1e-9);
        prop_assert!((p - psnr(&flip_horizontal(&a), &flip_horizontal(&b), 1.0).unwrap()).abs() < 1e-9);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((s - ssim(&flip_vertical(&a), &flip_vertical(&b)).unwrap()).abs() < 1e-9);
        prop_assert!(s <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn charbonnier_is_at_least_eps(h in 1usize..8, w in 1usize..8, seed in any::<u64>(), global in any::<bool>()) {
        let mode = if global { LossMode::GlobalNorm } else { LossMode::ElementwiseMean };
        let g = Graph::<f64>::inference();
        let a = g.constant(random([1, 3, h, w], seed));
        let b = g.constant(random([1, 3, h, w], seed ^ 7));
        let loss = g.charbonnier(&a, &b, CHARBONNIER_EPS, mode).unwrap().scalar().unwrap();
        prop_assert!(loss >= CHARBONNIER_EPS);
        let same = g.charbonnier(&a, &a, CHARBONNIER_EPS, mode).unwrap().scalar().unwrap();
        prop_assert_eq!(same, CHARBONNIER_EPS);
    }

    #[test]
    fn cost_scales_with_area(levels in 2usize..5, half_width in 4usize..12, hm in 1usize..4, wm in 1usize..4) {
        let config = NetworkConfig::constant(levels, 2 * half_width);
        let m = config.pad_multiple();
        let small = count_cost(&config, hm * m, wm * m).unwrap();
        let large = count_cost(&config, 2 * hm * m, 2 * wm * m).unwrap();
        prop_assert_eq!(small.entries.len(), large.entries.len());
        prop_assert_eq!(small.params(), large.params());
        for (s, l) in small.entries.iter().zip(&large.entries) {
            prop_assert_eq!(&s.name, &l.name);
            let expected = if s.spatial { 4 * s.flops } else { s.flops };
            prop_assert_eq!(l.flops, expected, "{}", s.name);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forward_preserves_shape(h in 8usize..40, w in 8usize..40, n in 1usize..3, seed in any::<u64>()) {
        let net = HwmNet::<f32>::build(NetworkConfig::constant(3, 8), seed).unwrap();
        let x: Tensor<f32> = image([n, 3, h, w], seed).cast();
        let y = net.infer(&x).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.all_finite());
    }
}
