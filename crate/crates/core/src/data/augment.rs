//! Geometric and color augmentations. Geometric transforms act identically
//! on image and mask; color transforms touch the image only.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Augmentation {
    Rot90,
    HFlip,
    VFlip,
    ShiftRotate,
    Hsv,
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rot90" => Ok(Augmentation::Rot90),
            "hflip" => Ok(Augmentation::HFlip),
            "vflip" => Ok(Augmentation::VFlip),
            "shift_rotate" => Ok(Augmentation::ShiftRotate),
            "hsv" => Ok(Augmentation::Hsv),
            other => Err(Error::Config(format!(
                "unknown augmentation {other:?} (expected rot90, hflip, vflip, shift_rotate or hsv)"
            ))),
        }
    }
}

/// Parses a comma-separated flag list such as `"rot90,hflip"`.
pub fn parse_flags(list: &str) -> Result<Vec<Augmentation>> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flags: Vec<Augmentation>,
    /// Chance of applying each enabled transform.
    pub probability: f64,
    /// Largest rotation angle in degrees, sampled from `[-max, max]`.
    pub max_angle: f64,
    /// Largest shift as a fraction of the extent.
    pub max_shift: f64,
    /// Image value written where shift-rotate samples outside the source.
    pub fill: f32,
    /// Hue offset bound in turns.
    pub hue: f32,
    pub saturation: f32,
    pub value: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flags: vec![Augmentation::Rot90, Augmentation::HFlip, Augmentation::VFlip],
            probability: 0.5,
            max_angle: 90.0,
            max_shift: 0.1,
            fill: 0.0,
            hue: 0.05,
            saturation: 0.1,
            value: 0.1,
        }
    }
}

/// A concrete, fully parameterized transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    /// Counter-clockwise quarter turns.
    Rot90(u8),
    HFlip,
    VFlip,
    /// Shift in pixels then rotation in degrees about the center.
    ShiftRotate { dx: f64, dy: f64, degrees: f64 },
    /// Hue offset (turns), saturation and value offsets.
    Hsv { dh: f32, ds: f32, dv: f32 },
}

/// Remaps every channel of `[C, H, W]` with `src(y, x) -> (sy, sx)` giving
/// the output shape and the source index.
fn permute(t: &Tensor<f32>, oh: usize, ow: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = src(y, x);
                out.push(t.data()[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::from_parts(vec![c, oh, ow], out)
}

fn geometric(t: &Tensor<f32>, tr: Transform) -> Tensor<f32> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    match tr {
        Transform::HFlip => permute(t, h, w, |y, x| (y, w - 1 - x)),
        Transform::VFlip => permute(t, h, w, |y, x| (h - 1 - y, x)),
        Transform::Rot90(k) => match k % 4 {
            0 => t.clone(),
            // Output (y, x) of a counter-clockwise turn reads input (x, w−1−y).
            1 => permute(t, w, h, |y, x| (x, w - 1 - y)),
            2 => permute(t, h, w, |y, x| (h - 1 - y, w - 1 - x)),
            _ => permute(t, w, h, |y, x| (h - 1 - x, y)),
        },
        _ => unreachable!("not a permutation"),
    }
}

/// Inverse-maps each output pixel center into the source frame.
fn shift_rotate(t: &Tensor<f32>, dx: f64, dy: f64, degrees: f64, nearest: bool, fill: f32) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mut out = vec![fill; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5 - cx - dx, y as f64 + 0.5 - cy - dy);
            // Rotate by −θ to find the source point.
            let sx = cos * px + sin * py + cx - 0.5;
            let sy = -sin * px + cos * py + cy - 0.5;
            for ch in 0..c {
                let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
                let v = if nearest {
                    let (ix, iy) = (sx.round(), sy.round());
                    (ix >= 0.0 && iy >= 0.0 && ix < w as f64 && iy < h as f64).then(|| plane[iy as usize * w + ix as usize])
                } else {
                    bilinear(plane, h, w, sy, sx)
                };
                if let Some(v) = v {
                    out[(ch * h + y) * w + x] = v;
                }
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

fn bilinear(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> Option<f32> {
    if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
        return None;
    }
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
    let at = |y: usize, x: usize| plane[y * w + x];
    let top = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
    let bot = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
    Some(top + fy * (bot - top))
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn hsv_shift(t: &Tensor<f32>, dh: f32, ds: f32, dv: f32) -> Tensor<f32> {
    let n = t.shape()[1] * t.shape()[2];
    let mut out = t.clone();
    let d = out.data_mut();
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
        let (r, g, b) = hsv_to_rgb(h + dh, (s + ds).clamp(0.0, 1.0), (v + dv).clamp(0.0, 1.0));
        d[i] = r.clamp(0.0, 1.0);
        d[n + i] = g.clamp(0.0, 1.0);
        d[2 * n + i] = b.clamp(0.0, 1.0);
    }
    out
}

impl Transform {
    pub fn apply(&self, sample: &Sample, fill: f32) -> Sample {
        let (image, mask) = match *self {
            Transform::Hsv { dh, ds, dv } => (hsv_shift(&sample.image, dh, ds, dv), sample.mask.clone()),
            Transform::ShiftRotate { dx, dy, degrees } => (
                shift_rotate(&sample.image, dx, dy, degrees, false, fill),
                shift_rotate(&sample.mask, dx, dy, degrees, true, 0.0),
            ),
            tr => (geometric(&sample.image, tr), geometric(&sample.mask, tr)),
        };
        Sample {
            id: sample.id.clone(),
            image,
            mask,
        }
    }
}

/// Draws the transforms `augment` would apply for this seed.
pub fn sample_transforms(cfg: &AugmentConfig, size: (usize, usize), seed: u64) -> Vec<Transform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for flag in &cfg.flags {
        if !rng.random_bool(cfg.probability.clamp(0.0, 1.0)) {
            continue;
        }
        out.push(match flag {
            Augmentation::Rot90 => Transform::Rot90(rng.random_range(1..4)),
            Augmentation::HFlip => Transform::HFlip,
            Augmentation::VFlip => Transform::VFlip,
            Augmentation::ShiftRotate => {
                let sh = |rng: &mut ChaCha8Rng, extent: usize| {
                    let m = cfg.max_shift * extent as f64;
                    if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 }
                };
                let dx = sh(&mut rng, size.1);
                let dy = sh(&mut rng, size.0);
                let degrees = if cfg.max_angle > 0.0 { rng.random_range(-cfg.max_angle..=cfg.max_angle) } else { 0.0 };
                Transform::ShiftRotate { dx, dy, degrees }
            }
            Augmentation::Hsv => {
                let mut off = |b: f32| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
                Transform::Hsv {
                    dh: off(cfg.hue),
                    ds: off(cfg.saturation),
                    dv: off(cfg.value),
                }
            }
        });
    }
    out
}

/// Randomly augments a sample; deterministic in `seed`.
pub fn augment(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Sample {
    sample_transforms(cfg, (sample.height(), sample.width()), seed)
        .iter()
        .fold(sample.clone(), |s, tr| tr.apply(&s, cfg.fill))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marker(h: usize, w: usize, y: usize, x: usize) -> Sample {
        let mut image = Tensor::zeros(vec![3, h, w]);
        let mut mask = Tensor::zeros(vec![1, h, w]);
        image.data_mut()[y * w + x] = 1.0;
        mask.data_mut()[y * w + x] = 1.0;
        Sample::new("m", image, mask).unwrap()
    }

    fn position(t: &Tensor<f32>) -> (usize, usize) {
        let w = t.shape()[2];
        let i = t.data().iter().position(|&v| v == 1.0).unwrap();
        (i / w, i % w)
    }

    #[test]
    fn rot90_quarter_turn() {
        // Top-right corner moves to top-left under a counter-clockwise turn.
        let s = Transform::Rot90(1).apply(&marker(3, 5, 0, 4), 0.0);
        assert_eq!(s.mask.shape(), [1, 5, 3]);
        assert_eq!(position(&s.mask), (0, 0));
        assert_eq!(position(&s.image), (0, 0));
        let s = Transform::Rot90(1).apply(&marker(3, 5, 2, 0), 0.0);
        assert_eq!(position(&s.mask), (4, 2));
    }

    #[test]
    fn rot90_inverse_pairs() {
        let s = marker(4, 6, 1, 2);
        let back = Transform::Rot90(3).apply(&Transform::Rot90(1).apply(&s, 0.0), 0.0);
        assert_eq!(back, s);
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.4, 0.6), (0.9, 0.1, 0.1), (0.5, 0.5, 0.5), (0.0, 0.7, 0.3)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn hsv_leaves_mask() {
        let s = marker(4, 4, 1, 1);
        let out = Transform::Hsv { dh: 0.1, ds: 0.1, dv: -0.1 }.apply(&s, 0.0);
        assert_eq!(out.mask, s.mask);
    }

    #[test]
    fn zero_shift_rotate_is_identity() {
        let s = marker(6, 6, 2, 3);
        let out = Transform::ShiftRotate { dx: 0.0, dy: 0.0, degrees: 0.0 }.apply(&s, 0.0);
        assert_eq!(out, s);
    }

    #[test]
    fn integer_shift_moves_marker() {
        let s = marker(8, 8, 2, 3);
        let out = Transform::ShiftRotate { dx: 2.0, dy: 1.0, degrees: 0.0 }.apply(&s, 0.0);
        assert_eq!(position(&out.mask), (3, 5));
        assert_eq!(position(&out.image), (3, 5));
    }

    #[test]
    fn right_angle_rotation_matches_rot90() {
        // About the center of an even square, +90° equals a clockwise quarter
        // turn in image coordinates (y grows downward).
        let s = marker(6, 6, 1, 4);
        let out = Transform::ShiftRotate { dx: 0.0, dy: 0.0, degrees: 90.0 }.apply(&s, 0.0);
        assert_eq!(out.mask, Transform::Rot90(3).apply(&s, 0.0).mask);
    }

    #[test]
    fn unknown_flag() {
        assert!(parse_flags("rot90,shear").is_err());
        assert_eq!(parse_flags("hflip, vflip").unwrap(), [Augmentation::HFlip, Augmentation::VFlip]);
    }
}
