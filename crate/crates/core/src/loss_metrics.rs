//! Segmentation losses over probability maps and thresholded metrics.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::ProbabilityPyramid;
use crate::tensor::ops;
use crate::tensor::{BackwardOp, Element, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(Error::Config(format!("unknown reduction {other:?} (expected mean or sum)"))),
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        })
    }
}

/// How the ground truth is reduced to each pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GtDownsample {
    /// Keep the top-left pixel of every 2×2 window.
    #[default]
    Nearest,
    /// Keep a pixel if any pixel of its window is foreground; preserves thin
    /// structures.
    MaxPool,
}

impl FromStr for GtDownsample {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(GtDownsample::Nearest),
            "maxpool" => Ok(GtDownsample::MaxPool),
            other => Err(Error::Config(format!(
                "unknown ground-truth downsampling {other:?} (expected nearest or maxpool)"
            ))),
        }
    }
}

impl fmt::Display for GtDownsample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GtDownsample::Nearest => "nearest",
            GtDownsample::MaxPool => "maxpool",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Dice exponent, within `[1, 2]`.
    pub gamma: f64,
    /// Dice denominator guard.
    pub eps: f64,
    /// Predictions are clamped to `[clamp, 1 − clamp]` before taking logs.
    pub clamp: f64,
    pub bce_reduction: Reduction,
    pub gt_downsample: GtDownsample,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.5,
            eps: 1e-5,
            clamp: 1e-7,
            bce_reduction: Reduction::Mean,
            gt_downsample: GtDownsample::Nearest,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1.0..=2.0).contains(&self.gamma) {
            return Err(Error::Config(format!("loss.gamma = {} is outside [1, 2]", self.gamma)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("loss.eps = {} must be positive", self.eps)));
        }
        if !(self.clamp > 0.0 && self.clamp < 0.5) {
            return Err(Error::Config(format!("loss.clamp = {} must lie in (0, 0.5)", self.clamp)));
        }
        Ok(())
    }
}

fn check_pair<T: Element>(op: &'static str, t: &Tensor<T>, s: &Tensor<T>) -> Result<()> {
    if t.shape() != s.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs target {:?}", t.shape(), s.shape()),
        ));
    }
    Ok(())
}

/// Scalar loss whose gradient with respect to the prediction was computed
/// during the forward pass.
struct PrecomputedGrad<T> {
    name: &'static str,
    dt: Tensor<T>,
}

impl<T: Element> BackwardOp<T> for PrecomputedGrad<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.data()[0];
        Ok(vec![Some(self.dt.map(|v| v * g))])
    }
}

/// Binary cross-entropy of prediction `t` against a binary target `s`.
pub fn bce_loss<T: Element>(t: &Var<T>, s: &Tensor<T>, cfg: &LossConfig) -> Result<Var<T>> {
    check_pair("bce_loss", t.value(), s)?;
    let (lo, hi) = (T::of(cfg.clamp), T::of(1.0 - cfg.clamp));
    let norm = match cfg.bce_reduction {
        Reduction::Mean => T::one() / T::of(s.len() as f64),
        Reduction::Sum => T::one(),
    };
    let mut total = T::zero();
    let mut dt = Vec::with_capacity(s.len());
    for (&p, &y) in t.value().data().iter().zip(s.data()) {
        let c = p.max(lo).min(hi);
        total -= y * c.ln() + (T::one() - y) * (T::one() - c).ln();
        let inside = p >= lo && p <= hi;
        dt.push(if inside { norm * ((T::one() - y) / (T::one() - c) - y / c) } else { T::zero() });
    }
    let dt = Tensor::from_parts(s.shape().to_vec(), dt);
    Ok(Var::from_op(
        Tensor::scalar(total * norm),
        &[t],
        PrecomputedGrad { name: "bce_loss", dt },
    ))
}

/// Noise-robust dice loss `Σ|t−s|^γ / (Σt² + Σs² + ε)`.
///
/// Batched inputs `[N, …]` with `N > 1` are scored per image and averaged.
pub fn nr_dice_loss<T: Element>(t: &Var<T>, s: &Tensor<T>, cfg: &LossConfig) -> Result<Var<T>> {
    check_pair("nr_dice_loss", t.value(), s)?;
    let n = if t.value().rank() == 4 { t.shape()[0] } else { 1 };
    let per = s.len() / n;
    let (gamma, eps) = (T::of(cfg.gamma), T::of(cfg.eps));
    let inv_n = T::one() / T::of(n as f64);
    let mut total = T::zero();
    let mut dt = vec![T::zero(); s.len()];
    let td = t.value().data();
    for b in 0..n {
        let range = b * per..(b + 1) * per;
        let (tb, sb) = (&td[range.clone()], &s.data()[range.clone()]);
        let mut num = T::zero();
        let mut den = eps;
        for (&p, &y) in tb.iter().zip(sb) {
            num += (p - y).abs().powf(gamma);
            den += p * p + y * y;
        }
        total += num / den;
        for ((g, &p), &y) in dt[range].iter_mut().zip(tb).zip(sb) {
            let d = p - y;
            let dnum = if d == T::zero() { T::zero() } else { gamma * d.abs().powf(gamma - T::one()) * d.signum() };
            *g = inv_n * (dnum / den - num * T::of(2.0) * p / (den * den));
        }
    }
    let dt = Tensor::from_parts(s.shape().to_vec(), dt);
    Ok(Var::from_op(
        Tensor::scalar(total * inv_n),
        &[t],
        PrecomputedGrad { name: "nr_dice_loss", dt },
    ))
}

/// BCE plus noise-robust dice.
pub fn combined_loss<T: Element>(t: &Var<T>, s: &Tensor<T>, cfg: &LossConfig) -> Result<Var<T>> {
    ops::add(&bce_loss(t, s, cfg)?, &nr_dice_loss(t, s, cfg)?)
}

/// One level of ground-truth decimation by 2 (rank 3 `[C,H,W]` or rank 4).
pub fn downsample_mask<T: Element>(mask: &Tensor<T>, rule: GtDownsample) -> Result<Tensor<T>> {
    let rank = mask.rank();
    let (n, c, h, w) = match rank {
        3 => (1, mask.shape()[0], mask.shape()[1], mask.shape()[2]),
        4 => mask.dims4()?,
        _ => return Err(Error::shape("downsample_ground_truth", format!("expected rank 3 or 4, got {:?}", mask.shape()))),
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "downsample_ground_truth",
            format!("extents {h}×{w} are not divisible by 2"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let md = mask.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        for y in 0..ho {
            for x in 0..wo {
                let at = |dy: usize, dx: usize| md[(p * h + 2 * y + dy) * w + 2 * x + dx];
                out.push(match rule {
                    GtDownsample::Nearest => at(0, 0),
                    GtDownsample::MaxPool => at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)),
                });
            }
        }
    }
    let shape = if rank == 3 { vec![c, ho, wo] } else { vec![n, c, ho, wo] };
    Tensor::new(shape, out)
}

/// Ground truth at `H/2, …, H/2^levels`.
pub fn downsample_ground_truth<T: Element>(mask: &Tensor<T>, levels: usize, rule: GtDownsample) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(levels);
    let mut cur = mask.clone();
    for _ in 0..levels {
        cur = downsample_mask(&cur, rule)?;
        out.push(cur.clone());
    }
    Ok(out)
}

/// The differentiable total plus each term's value for logging. Terms are
/// ordered `m_1 … m_L, m_out`; with deep supervision off only `m_out`
/// contributes, but every term is still reported.
pub struct LossTerms<T: Element = f32> {
    pub total: Var<T>,
    pub terms: Vec<f64>,
    pub final_term: f64,
}

/// Sum of combined losses over every pyramid level and the final output.
pub fn total_loss<T: Element>(
    pyramid: &ProbabilityPyramid<T>,
    gt: &Tensor<T>,
    cfg: &LossConfig,
    deep_supervision: bool,
) -> Result<LossTerms<T>> {
    let levels = downsample_ground_truth(gt, pyramid.maps.len(), cfg.gt_downsample)
        .map_err(|e| misaligned(e, gt, &pyramid.out))?;
    let mut terms = Vec::with_capacity(levels.len() + 1);
    let mut parts = Vec::with_capacity(levels.len() + 1);
    for (m, y) in pyramid.maps.iter().zip(&levels) {
        let l = combined_loss(m, y, cfg).map_err(|e| misaligned(e, y, m))?;
        terms.push(l.value().item()?.to_f64_lossy());
        if deep_supervision {
            parts.push(l);
        }
    }
    let last = combined_loss(&pyramid.out, gt, cfg)?;
    let final_term = last.value().item()?.to_f64_lossy();
    terms.push(final_term);
    parts.push(last);
    let total = if parts.len() == 1 { parts.pop().expect("one term") } else { ops::add_all(&parts)? };
    Ok(LossTerms { total, terms, final_term })
}

fn misaligned<T: Element>(err: Error, gt: &Tensor<T>, map: &Var<T>) -> Error {
    match err {
        Error::Shape { op, detail } => Error::Shape {
            op,
            detail: format!("ground truth {:?} misaligned with map {:?}: {detail}", gt.shape(), map.shape()),
        },
        e => e,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Counts with predictions binarized as `p ≥ threshold`.
    pub fn from_maps<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<Self> {
        check_pair("metrics", pred, gt)?;
        let th = T::of(threshold);
        let half = T::of(0.5);
        let mut c = Self::default();
        for (&p, &y) in pred.data().iter().zip(gt.data()) {
            match (p >= th, y >= half) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(&self) -> Metrics {
        // A zero denominator means one side has no foreground; score 1 only
        // when the other side is empty as well.
        let ratio = |num: u64, den: u64, both_empty: bool| {
            if den == 0 {
                if both_empty { 1.0 } else { 0.0 }
            } else {
                num as f64 / den as f64
            }
        };
        let empty = self.tp + self.fp + self.fn_ == 0;
        Metrics {
            iou: ratio(self.tp, self.tp + self.fp + self.fn_, empty),
            f1: ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, empty),
            precision: ratio(self.tp, self.tp + self.fp, self.fn_ == 0),
            recall: ratio(self.tp, self.tp + self.fn_, self.fp == 0),
            counts: *self,
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: ConfusionCounts,
}

pub fn metrics<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<Metrics> {
    Ok(ConfusionCounts::from_maps(pred, gt, threshold)?.metrics())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn bce_half() {
        let l = bce_loss(&Var::constant(t64(&[1, 1, 1, 1], &[0.5])), &t64(&[1, 1, 1, 1], &[1.0]), &LossConfig::default())
            .unwrap();
        assert!((l.value().item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_perfect_is_clamp_sized() {
        let s = t64(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let l = bce_loss(&Var::constant(s.clone()), &s, &LossConfig::default()).unwrap();
        assert!(l.value().item().unwrap() >= 0.0 && l.value().item().unwrap() <= 2e-7);
    }

    #[test]
    fn dice_reference_case() {
        let s = t64(&[1, 1, 2, 2], &[1.0, 1.0, 0.0, 0.0]);
        let t = Var::constant(Tensor::full(vec![1, 1, 2, 2], 0.5));
        let l = nr_dice_loss(&t, &s, &LossConfig::default()).unwrap().value().item().unwrap();
        let oracle = 4.0 * 0.5f64.powf(1.5) / (3.0 + 1e-5);
        assert!((l - oracle).abs() < 1e-12, "{l} vs {oracle}");
        // The commonly quoted rounding of this case.
        assert!((l - 0.471400).abs() < 5e-6);
    }

    #[test]
    fn dice_zero_iff_equal() {
        let s = t64(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let l = nr_dice_loss(&Var::constant(s.clone()), &s, &LossConfig::default()).unwrap();
        assert_eq!(l.value().item().unwrap(), 0.0);
    }

    #[test]
    fn dice_batch_is_mean_of_images() {
        let cfg = LossConfig::default();
        let a = t64(&[1, 1, 1, 2], &[0.2, 0.9]);
        let b = t64(&[1, 1, 1, 2], &[0.7, 0.1]);
        let sa = t64(&[1, 1, 1, 2], &[0.0, 1.0]);
        let sb = t64(&[1, 1, 1, 2], &[1.0, 1.0]);
        let la = nr_dice_loss(&Var::constant(a.clone()), &sa, &cfg).unwrap().value().item().unwrap();
        let lb = nr_dice_loss(&Var::constant(b.clone()), &sb, &cfg).unwrap().value().item().unwrap();
        let both = nr_dice_loss(
            &Var::constant(Tensor::stack_batch(&[a, b]).unwrap()),
            &Tensor::stack_batch(&[sa, sb]).unwrap(),
            &cfg,
        )
        .unwrap();
        assert!((both.value().item().unwrap() - (la + lb) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let t = Var::constant(Tensor::<f64>::full(vec![1, 1, 2, 2], 0.5));
        let s = Tensor::zeros(vec![1, 1, 2, 3]);
        assert!(bce_loss(&t, &s, &LossConfig::default()).is_err());
        assert!(nr_dice_loss(&t, &s, &LossConfig::default()).is_err());
    }

    #[test]
    fn clamped_pixels_get_no_gradient() {
        let t = Var::parameter(t64(&[1, 1, 1, 2], &[0.0, 0.3]));
        let l = bce_loss(&t, &t64(&[1, 1, 1, 2], &[1.0, 1.0]), &LossConfig::default()).unwrap();
        backward(&l).unwrap();
        let g = t.grad().clone().unwrap();
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] - (-1.0 / 0.3 / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_pyramid() {
        let ones = Tensor::<f32>::ones(vec![1, 512, 512]);
        let levels = downsample_ground_truth(&ones, 4, GtDownsample::Nearest).unwrap();
        let sizes: Vec<_> = levels.iter().map(|l| l.shape()[1]).collect();
        assert_eq!(sizes, [256, 128, 64, 32]);
        assert!(levels.iter().all(|l| l.data().iter().all(|&v| v == 1.0)));
        let checker = Tensor::<f32>::from_fn(vec![1, 4, 4], |i| ((i / 4 + i % 4) % 2) as f32);
        let l1 = downsample_mask(&checker, GtDownsample::Nearest).unwrap();
        assert!(l1.data().iter().all(|&v| v == 0.0));
        let l1 = downsample_mask(&checker, GtDownsample::MaxPool).unwrap();
        assert!(l1.data().iter().all(|&v| v == 1.0));
        assert!(downsample_mask(&Tensor::<f32>::zeros(vec![1, 5, 4]), GtDownsample::Nearest).is_err());
    }

    #[test]
    fn metric_substitution() {
        let m = ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 7 }.metrics();
        assert_eq!(m.iou, 0.6);
        assert_eq!(m.f1, 0.75);
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.75);
    }

    #[test]
    fn empty_conventions() {
        let both = ConfusionCounts { tn: 4, ..Default::default() }.metrics();
        assert_eq!((both.iou, both.f1, both.precision, both.recall), (1.0, 1.0, 1.0, 1.0));
        let missed = ConfusionCounts { fn_: 2, tn: 2, ..Default::default() }.metrics();
        assert_eq!((missed.iou, missed.f1, missed.precision, missed.recall), (0.0, 0.0, 0.0, 0.0));
        let spurious = ConfusionCounts { fp: 2, tn: 2, ..Default::default() }.metrics();
        assert_eq!((spurious.precision, spurious.recall), (0.0, 0.0));
    }

    #[test]
    fn threshold_boundary_is_foreground() {
        let p = Tensor::<f32>::new(vec![1, 1, 1, 2], vec![0.5, 0.4999]).unwrap();
        let y = Tensor::<f32>::new(vec![1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let m = metrics(&p, &y, 0.5).unwrap();
        assert_eq!(m.counts, ConfusionCounts { tp: 1, tn: 1, ..Default::default() });
    }

    #[test]
    fn config_validation() {
        LossConfig::default().validate().unwrap();
        assert!(LossConfig { gamma: 2.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { eps: 0.0, ..Default::default() }.validate().is_err());
    }
}
