#![allow(dead_code)]

use std::path::Path;

use hwmnet::data::Image8;
use hwmnet::train::TrainPair;

/// Smooth colored ground truth and a darkened copy, both quantized to bytes.
pub fn synthetic_pair(name: &str, h: usize, w: usize, phase: f64) -> TrainPair {
    let mut gt = Vec::with_capacity(h * w * 3);
    let mut low = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = 0.5
                    + 0.35 * ((x as f64 * 0.11 + c as f64 + phase).sin() * (y as f64 * 0.07 + 0.5 * c as f64).cos());
                gt.push((v * 255.0).round() as u8);
                low.push((v * 0.3 * 255.0).round() as u8);
            }
        }
    }
    TrainPair {
        name: name.into(),
        low: Image8 {
            height: h,
            width: w,
            rgb: low,
        },
        gt: Image8 {
            height: h,
            width: w,
            rgb: gt,
        },
    }
}

/// Write pairs as `<root>/low/<name>.png` and `<root>/high/<name>.png`.
pub fn write_dataset(root: &Path, pairs: &[TrainPair]) {
    std::fs::create_dir_all(root.join("low")).unwrap();
    std::fs::create_dir_all(root.join("high")).unwrap();
    for p in pairs {
        p.low
            .save_png(root.join("low").join(format!("{}.png", p.name)))
            .unwrap();
        p.gt.save_png(root.join("high").join(format!("{}.png", p.name)))
            .unwrap();
    }
}
