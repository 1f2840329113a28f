//! Run configuration as a flat `key = value` text file.
//!
//! Lines starting with `#` are comments. Keys are dotted (`model.channels`).
//! An optional `profile = desk|paper` line selects the base profile; every
//! other key overrides it, in file order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::augment::{parse_flags, AugmentConfig, Augmentation};
use crate::data::{SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::loss_metrics::LossConfig;
use crate::network::{Ablation, ModelConfig};
use crate::optim::AdamConfig;

/// One learning-rate stage lasting `epochs` passes over the training set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage {
    pub lr: f64,
    pub epochs: usize,
}

pub fn default_schedule() -> Vec<Stage> {
    vec![
        Stage { lr: 1e-3, epochs: 60 },
        Stage { lr: 1e-4, epochs: 60 },
        Stage { lr: 1e-5, epochs: 20 },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Dir,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Template for synthetic scenes; its size follows the model input size
    /// and its seed is the first training seed.
    pub synthetic: SyntheticSpec,
    pub train_samples: usize,
    /// Synthetic test scenes use the seeds following the training seeds.
    pub test_samples: usize,
    pub dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub augment: AugmentConfig,
    /// Sliding-window patch size applied to loaded images.
    pub patch: Option<usize>,
    pub pad: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: AdamConfig,
    pub schedule: Vec<Stage>,
    pub batch_size: usize,
    pub seed: u64,
    /// Hard cap on optimizer steps, regardless of the schedule.
    pub max_steps: Option<usize>,
    /// Stop once training-set IoU reaches this value.
    pub target_iou: Option<f64>,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl RunConfig {
    /// Full-size profile: C = 64 at 512×512, batch 64.
    pub fn paper() -> Self {
        let model = ModelConfig::paper();
        Self {
            loss: LossConfig::default(),
            optim: AdamConfig::default(),
            schedule: default_schedule(),
            batch_size: 64,
            seed: 0,
            max_steps: None,
            target_iou: None,
            eval_every: 100,
            checkpoint_every: 500,
            log_every: 10,
            data: DataConfig {
                source: DataSource::Synthetic,
                synthetic: SyntheticSpec::roads(model.input_size.0, 0),
                train_samples: 256,
                test_samples: 64,
                dir: None,
                test_dir: None,
                augment: AugmentConfig::default(),
                patch: None,
                pad: false,
            },
            out_dir: PathBuf::from("runs/default"),
            model,
        }
    }

    /// Laptop-scale profile: C = 8 at 128×128, batch 4, 16 synthetic scenes.
    pub fn desk() -> Self {
        let mut cfg = Self::paper();
        cfg.model = ModelConfig::desk();
        cfg.batch_size = 4;
        cfg.eval_every = 50;
        cfg.checkpoint_every = 200;
        cfg.data.synthetic = SyntheticSpec::roads(cfg.model.input_size.0, 0);
        cfg.data.train_samples = 16;
        cfg.data.test_samples = 8;
        cfg
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected paper or desk)"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(_, k, _)| k == "profile") {
            Some((_, _, v)) => Self::profile(v)?,
            None => Self::paper(),
        };
        for (line, k, v) in &pairs {
            if k != "profile" {
                cfg.set(k, v).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("line {line}: {msg}")),
                    e => e,
                })?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let d = &mut self.data;
        match key {
            "model.channels" => m.base_channels = num(key, value)?,
            "model.paths" => m.paths = num(key, value)?,
            "model.blocks" => m.blocks_per_path = num(key, value)?,
            "model.dilation_constant" => m.dilation_constant = num(key, value)?,
            "model.input_size" => {
                m.input_size = extent(key, value)?;
                d.synthetic.size = m.input_size;
            }
            "model.ablation" => m.ablation = Ablation::variant(value)?,
            "model.pool_mode" => m.ablation.pool_mode = value.parse()?,
            "model.deep_supervision" => m.ablation.deep_supervision = flag(key, value)?,
            "model.dilation" => m.ablation.dilation_enabled = flag(key, value)?,
            "model.damsca" => m.ablation.damsca_enabled = flag(key, value)?,
            "loss.gamma" => self.loss.gamma = num(key, value)?,
            "loss.eps" => self.loss.eps = num(key, value)?,
            "loss.clamp" => self.loss.clamp = num(key, value)?,
            "loss.bce_reduction" => self.loss.bce_reduction = value.parse()?,
            "loss.gt_downsample" => self.loss.gt_downsample = value.parse()?,
            "optim.beta1" => self.optim.beta1 = num(key, value)?,
            "optim.beta2" => self.optim.beta2 = num(key, value)?,
            "optim.eps" => self.optim.eps = num(key, value)?,
            "optim.schedule" => self.schedule = schedule(value)?,
            "train.batch_size" => self.batch_size = num(key, value)?,
            "train.seed" => self.seed = num(key, value)?,
            "train.max_steps" => self.max_steps = optional(key, value)?,
            "train.target_iou" => self.target_iou = optional(key, value)?,
            "train.eval_every" => self.eval_every = num(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "train.log_every" => self.log_every = num(key, value)?,
            "data.source" => {
                d.source = match value {
                    "synthetic" => DataSource::Synthetic,
                    "dir" => DataSource::Dir,
                    other => return Err(Error::Config(format!("data.source: unknown source {other:?}"))),
                }
            }
            "data.kind" => {
                d.synthetic.kind = value.parse()?;
                // Keep each kind's own density default unless set later.
                d.synthetic.count = match d.synthetic.kind {
                    SyntheticKind::Roads => SyntheticSpec::roads(1, 0).count,
                    SyntheticKind::Buildings => SyntheticSpec::buildings(1, 0).count,
                };
            }
            "data.seed" => d.synthetic.seed = num(key, value)?,
            "data.count" => d.synthetic.count = num(key, value)?,
            "data.road_width" => d.synthetic.road_width = range(key, value)?,
            "data.building_side" => d.synthetic.building_side = range(key, value)?,
            "data.noise" => d.synthetic.noise = num(key, value)?,
            "data.train_samples" => d.train_samples = num(key, value)?,
            "data.test_samples" => d.test_samples = num(key, value)?,
            "data.dir" => d.dir = path(value),
            "data.test_dir" => d.test_dir = path(value),
            "data.augment" => {
                d.augment.flags = if value == "none" { Vec::new() } else { parse_flags(value)? }
            }
            "data.augment_probability" => d.augment.probability = num(key, value)?,
            "data.max_angle" => d.augment.max_angle = num(key, value)?,
            "data.max_shift" => d.augment.max_shift = num(key, value)?,
            "data.fill" => d.augment.fill = num(key, value)?,
            "data.hue" => d.augment.hue = num(key, value)?,
            "data.saturation" => d.augment.saturation = num(key, value)?,
            "data.value" => d.augment.value = num(key, value)?,
            "data.patch" => d.patch = optional(key, value)?,
            "data.pad" => d.pad = flag(key, value)?,
            "out.dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.schedule.is_empty() {
            return Err(Error::Config("optim.schedule has no stages".into()));
        }
        if let Some(s) = self.schedule.iter().find(|s| !(s.lr > 0.0) || s.epochs == 0) {
            return Err(Error::Config(format!("schedule stage {}:{} must be positive", s.lr, s.epochs)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Config("train intervals must be at least 1".into()));
        }
        if let Some(t) = self.target_iou {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("train.target_iou = {t} outside [0, 1]")));
            }
        }
        if self.data.source == DataSource::Dir && self.data.dir.is_none() {
            return Err(Error::Config("data.source = dir requires data.dir".into()));
        }
        if self.data.source == DataSource::Synthetic {
            if self.data.synthetic.size != self.model.input_size {
                return Err(Error::Config("synthetic size must equal model.input_size".into()));
            }
            self.data.synthetic.validate()?;
        }
        Ok(())
    }

    /// Every setting as `key = value` lines; [`RunConfig::parse`] inverts it.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let d = &self.data;
        let ab = m.ablation;
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("model.channels", m.base_channels.to_string());
        put("model.paths", m.paths.to_string());
        put("model.blocks", m.blocks_per_path.to_string());
        put("model.dilation_constant", m.dilation_constant.to_string());
        put("model.input_size", format!("{}x{}", m.input_size.0, m.input_size.1));
        put("model.pool_mode", ab.pool_mode.to_string());
        put("model.deep_supervision", ab.deep_supervision.to_string());
        put("model.dilation", ab.dilation_enabled.to_string());
        put("model.damsca", ab.damsca_enabled.to_string());
        put("loss.gamma", fmt_f64(self.loss.gamma));
        put("loss.eps", fmt_f64(self.loss.eps));
        put("loss.clamp", fmt_f64(self.loss.clamp));
        put("loss.bce_reduction", self.loss.bce_reduction.to_string());
        put("loss.gt_downsample", self.loss.gt_downsample.to_string());
        put("optim.beta1", fmt_f64(self.optim.beta1));
        put("optim.beta2", fmt_f64(self.optim.beta2));
        put("optim.eps", fmt_f64(self.optim.eps));
        let stages: Vec<String> = self.schedule.iter().map(|s| format!("{}:{}", fmt_f64(s.lr), s.epochs)).collect();
        put("optim.schedule", stages.join(", "));
        put("train.batch_size", self.batch_size.to_string());
        put("train.seed", self.seed.to_string());
        put("train.max_steps", opt(self.max_steps.map(|v| v.to_string())));
        put("train.target_iou", opt(self.target_iou.map(fmt_f64)));
        put("train.eval_every", self.eval_every.to_string());
        put("train.checkpoint_every", self.checkpoint_every.to_string());
        put("train.log_every", self.log_every.to_string());
        let source = match d.source {
            DataSource::Synthetic => "synthetic",
            DataSource::Dir => "dir",
        };
        put("data.source", source.into());
        put("data.kind", d.synthetic.kind.to_string());
        put("data.seed", d.synthetic.seed.to_string());
        put("data.count", d.synthetic.count.to_string());
        put("data.road_width", format!("{},{}", d.synthetic.road_width.0, d.synthetic.road_width.1));
        put("data.building_side", format!("{},{}", d.synthetic.building_side.0, d.synthetic.building_side.1));
        put("data.noise", fmt_f64(d.synthetic.noise as f64));
        put("data.train_samples", d.train_samples.to_string());
        put("data.test_samples", d.test_samples.to_string());
        if let Some(p) = &d.dir {
            put("data.dir", p.display().to_string());
        }
        if let Some(p) = &d.test_dir {
            put("data.test_dir", p.display().to_string());
        }
        let flags: Vec<&str> = d.augment.flags.iter().map(|f| flag_name(*f)).collect();
        put("data.augment", if flags.is_empty() { "none".into() } else { flags.join(",") });
        put("data.augment_probability", fmt_f64(d.augment.probability));
        put("data.max_angle", fmt_f64(d.augment.max_angle));
        put("data.max_shift", fmt_f64(d.augment.max_shift));
        put("data.fill", fmt_f64(d.augment.fill as f64));
        put("data.hue", fmt_f64(d.augment.hue as f64));
        put("data.saturation", fmt_f64(d.augment.saturation as f64));
        put("data.value", fmt_f64(d.augment.value as f64));
        put("data.patch", opt(d.patch.map(|v| v.to_string())));
        put("data.pad", d.pad.to_string());
        put("out.dir", self.out_dir.display().to_string());
        out
    }

    /// Total optimizer steps implied by the schedule for `n` training samples.
    pub fn scheduled_steps(&self, n: usize) -> usize {
        let per_epoch = steps_per_epoch(n, self.batch_size);
        let total = self.schedule.iter().map(|s| s.epochs * per_epoch).sum();
        self.max_steps.map_or(total, |m| m.min(total))
    }

    /// Learning rate in force at `step` (0-based), or the last stage's rate
    /// past the end.
    pub fn lr_at(&self, step: usize, n: usize) -> f64 {
        let per_epoch = steps_per_epoch(n, self.batch_size);
        let mut end = 0;
        for s in &self.schedule {
            end += s.epochs * per_epoch;
            if step < end {
                return s.lr;
            }
        }
        self.schedule.last().map_or(0.0, |s| s.lr)
    }
}

/// Full batches per epoch; a training set smaller than one batch forms a
/// single batch.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    (n / batch).max(1)
}

fn flag_name(f: Augmentation) -> &'static str {
    match f {
        Augmentation::Rot90 => "rot90",
        Augmentation::HFlip => "hflip",
        Augmentation::VFlip => "vflip",
        Augmentation::ShiftRotate => "shift_rotate",
        Augmentation::Hsv => "hsv",
    }
}

/// Shortest representation that parses back to the same value.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn optional<N: std::str::FromStr>(key: &str, v: &str) -> Result<Option<N>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (v != "none" && !v.is_empty()).then(|| PathBuf::from(v))
}

/// `"128"` or `"128x96"` as `(height, width)`.
fn extent(key: &str, v: &str) -> Result<(usize, usize)> {
    match v.split_once(['x', '×']) {
        Some((h, w)) => Ok((num(key, h.trim())?, num(key, w.trim())?)),
        None => {
            let s = num(key, v)?;
            Ok((s, s))
        }
    }
}

fn range(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected `min,max`, got {v:?}")))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

/// `"1e-3:60, 1e-4:60"` as stages.
fn schedule(v: &str) -> Result<Vec<Stage>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (lr, ep) = s
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("optim.schedule: expected `lr:epochs`, got {s:?}")))?;
            Ok(Stage {
                lr: num("optim.schedule", lr.trim())?,
                epochs: num("optim.schedule", ep.trim())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for mut cfg in [RunConfig::paper(), RunConfig::desk()] {
            cfg.target_iou = Some(0.95);
            cfg.data.dir = Some("some/where".into());
            cfg.data.augment.flags.push(Augmentation::Hsv);
            cfg.model.ablation = Ablation::variant("no-damsca").unwrap();
            assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn profile_and_overrides() {
        let cfg = RunConfig::parse("# desk run\nprofile = desk\nmodel.channels = 4  # narrower\ntrain.seed=9\n").unwrap();
        assert_eq!(cfg.model.base_channels, 4);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.seed, 9);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::paper());
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("profile = desk\nmodel.chanels = 4\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(RunConfig::parse("train.batch_size = 0").is_err());
        assert!(RunConfig::parse("optim.schedule = 1e-3").is_err());
        assert!(RunConfig::parse("loss.gamma = 3").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }

    #[test]
    fn schedule_lookup() {
        let mut cfg = RunConfig::desk();
        cfg.schedule = schedule("1e-3:2, 1e-4:1").unwrap();
        // 16 samples at batch 4: four steps per epoch.
        assert_eq!(cfg.scheduled_steps(16), 12);
        assert_eq!(cfg.lr_at(7, 16), 1e-3);
        assert_eq!(cfg.lr_at(8, 16), 1e-4);
        assert_eq!(cfg.lr_at(100, 16), 1e-4);
        cfg.max_steps = Some(5);
        assert_eq!(cfg.scheduled_steps(16), 5);
    }
}
