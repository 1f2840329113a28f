//! Direct-formula references shared by the integration tests. Nothing here
//! calls into the crate's loss or metric code.
#![allow(dead_code)]

use mssdmpa::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mean (or summed) clamped binary cross-entropy, accumulated with Kahan
/// summation.
pub fn bce(t: &[f64], s: &[f64], clamp: f64, mean: bool) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (&p, &y) in t.iter().zip(s) {
        let p = p.clamp(clamp, 1.0 - clamp);
        let term = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        let v = term - comp;
        let next = sum + v;
        comp = (next - sum) - v;
        sum = next;
    }
    if mean { sum / t.len() as f64 } else { sum }
}

/// Noise-robust dice of one image.
pub fn dice(t: &[f64], s: &[f64], gamma: f64, eps: f64) -> f64 {
    let num: f64 = t.iter().zip(s).map(|(p, y)| (p - y).abs().powf(gamma)).sum();
    let den: f64 = t.iter().map(|p| p * p).sum::<f64>() + s.iter().map(|y| y * y).sum::<f64>() + eps;
    num / den
}

/// Dice averaged over the `n` images of a flat batch.
pub fn batch_dice(t: &[f64], s: &[f64], n: usize, gamma: f64, eps: f64) -> f64 {
    let per = t.len() / n;
    (0..n).map(|b| dice(&t[b * per..][..per], &s[b * per..][..per], gamma, eps)).sum::<f64>() / n as f64
}

/// Top-left decimation of `[N, 1, H, W]` by 2.
pub fn decimate(s: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for b in 0..n {
        for y in (0..h).step_by(2) {
            for x in (0..w).step_by(2) {
                out.push(s[(b * h + y) * w + x]);
            }
        }
    }
    out
}

#[derive(Debug, PartialEq)]
pub struct PixelMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Confusion counts by walking pixels; empty-vs-empty scores 1.
pub fn pixel_metrics(pred: &[f32], gt: &[f32], threshold: f32) -> PixelMetrics {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..pred.len() {
        let p = pred[i] >= threshold;
        let g = gt[i] >= 0.5;
        if p && g {
            tp += 1;
        } else if p {
            fp += 1;
        } else if g {
            fn_ += 1;
        } else {
            tn += 1;
        }
    }
    let frac = |a: u64, b: u64, empty: bool| match b {
        0 if empty => 1.0,
        0 => 0.0,
        _ => a as f64 / b as f64,
    };
    let none = tp + fp + fn_ == 0;
    PixelMetrics {
        tp,
        fp,
        fn_,
        tn,
        iou: frac(tp, tp + fp + fn_, none),
        f1: frac(2 * tp, 2 * tp + fp + fn_, none),
        precision: frac(tp, tp + fp, fn_ == 0),
        recall: frac(tp, tp + fn_, fp == 0),
    }
}

/// A random mask pair; the densities vary per seed, including empty and
/// full masks.
pub fn mask_pair(seed: u64, h: usize, w: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut r = rng(seed);
    let densities = [0.0, 0.02, 0.3, 0.5, 0.9, 1.0];
    let (a, b) = (densities[r.random_range(0..6)], densities[r.random_range(0..6)]);
    let pred = Tensor::from_fn(vec![1, 1, h, w], |_| r.random_range(0.0f32..1.0) * 0.5 + if r.random_bool(a) { 0.5 } else { 0.0 });
    let gt = Tensor::from_fn(vec![1, 1, h, w], |_| if r.random_bool(b) { 1.0 } else { 0.0 });
    (pred, gt)
}

/// Desk profile shrunk to a few seconds of training: C = 2 at 32×32.
pub fn tiny_config(steps: usize) -> mssdmpa::config::RunConfig {
    let mut cfg = mssdmpa::config::RunConfig::desk();
    for (k, v) in [
        ("model.channels", "2"),
        ("model.input_size", "32x32"),
        ("train.batch_size", "2"),
        ("data.train_samples", "4"),
        ("data.test_samples", "2"),
        ("train.log_every", "1000"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.max_steps = Some(steps);
    cfg
}
