//! Seeded, single-threaded training loop.
//!
//! Batch composition, augmentation draws and stochastic pooling draws are
//! pure functions of `(seed, step)`, so a run resumed from a checkpoint
//! continues exactly as the original would have.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{steps_per_epoch, DataSource, RunConfig};
use crate::data::synthetic::synthetic_set;
use crate::data::{augment, collate, extract_patches, load_dir, Sample};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalReport};
use crate::loss_metrics::{total_loss, Metrics};
use crate::network::Network;
use crate::nn::{apply_bn_updates, Ctx, Grad, NetworkState};
use crate::optim::Adam;
use crate::tensor::ops::Mode;
use crate::tensor::{backward, Tensor, Var};

pub const CHECKPOINT_FILE: &str = "checkpoint.mssd";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";

/// SplitMix64 finalizer over a combined key; decorrelates nearby seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const BATCH_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const POOL_STREAM: u64 = 3;

/// Loss terms recorded for one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    /// Combined loss of `m_1 … m_L` (reported even when unsupervised).
    pub terms: Vec<f64>,
    pub final_term: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalLog {
    /// Steps completed when evaluated.
    pub step: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    ScheduleComplete,
    MaxSteps,
    TargetReached,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub logs: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    pub stop: StopReason,
    pub steps: usize,
}

/// Training and test samples as described by the data configuration.
pub fn load_data(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => {
            let train = synthetic_set(&d.synthetic, d.train_samples)?;
            let mut test_spec = d.synthetic.clone();
            test_spec.seed = test_spec.seed.wrapping_add(d.train_samples as u64);
            let test = synthetic_set(&test_spec, d.test_samples)?;
            Ok((train, test))
        }
        DataSource::Dir => {
            let dir = d.dir.as_deref().ok_or_else(|| Error::Config("data.dir is not set".into()))?;
            let patch = |samples: Vec<Sample>| -> Result<Vec<Sample>> {
                match d.patch {
                    None => Ok(samples),
                    Some(p) => Ok(samples
                        .iter()
                        .map(|s| extract_patches(s, p, p, d.pad))
                        .collect::<Result<Vec<_>>>()?
                        .into_iter()
                        .flatten()
                        .collect()),
                }
            };
            let train = patch(load_dir(dir)?)?;
            let test = match &d.test_dir {
                Some(t) => patch(load_dir(t)?)?,
                None => Vec::new(),
            };
            Ok((train, test))
        }
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub network: Network,
    pub state: NetworkState<f32>,
    pub adam: Adam<f32>,
    /// Optimizer steps completed.
    pub step: usize,
    samples: Vec<Sample>,
    nan_at: Option<usize>,
}

impl Trainer {
    pub fn new(config: RunConfig, samples: Vec<Sample>) -> Result<Self> {
        let network = Network::new(&config.model)?;
        let state = network.init_state(config.seed)?;
        let adam = Adam::new(config.optim);
        Self::with_state(config, network, state, adam, 0, samples)
    }

    /// Continues from a checkpoint; the checkpoint's config is authoritative.
    pub fn resume(ck: Checkpoint, samples: Vec<Sample>) -> Result<Self> {
        let network = Network::new(&ck.config.model)?;
        let init = network.init_state::<f32>(0)?;
        let layout = |s: &NetworkState<f32>| s.iter().map(|(n, e)| (n.to_string(), e.tensor.shape().to_vec())).collect::<Vec<_>>();
        if layout(&init) != layout(&ck.state) {
            return Err(Error::Checkpoint("parameter layout does not match the configured model".into()));
        }
        Self::with_state(ck.config, network, ck.state, ck.adam, ck.step as usize, samples)
    }

    fn with_state(
        config: RunConfig,
        network: Network,
        state: NetworkState<f32>,
        adam: Adam<f32>,
        step: usize,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        config.validate()?;
        let (h, w) = config.model.input_size;
        if samples.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        if let Some(s) = samples.iter().find(|s| (s.height(), s.width()) != (h, w)) {
            return Err(Error::Config(format!(
                "sample {} is {}×{}, but the model input size is {h}×{w}",
                s.id,
                s.height(),
                s.width()
            )));
        }
        Ok(Self {
            config,
            network,
            state,
            adam,
            step,
            samples,
            nan_at: None,
        })
    }

    /// Forces a non-finite loss at the given step (divergence handling tests).
    #[doc(hidden)]
    pub fn inject_nan_at(&mut self, step: usize) {
        self.nan_at = Some(step);
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn steps_per_epoch(&self) -> usize {
        steps_per_epoch(self.samples.len(), self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.config.scheduled_steps(self.samples.len())
    }

    /// Sample indices of the batch used at `step`: an epoch-seeded
    /// permutation cut into consecutive full batches.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.samples.len();
        let per = self.steps_per_epoch();
        let (epoch, k) = (step / per, step % per);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(mix(self.config.seed, BATCH_STREAM), epoch as u64)));
        let b = self.config.batch_size.min(n);
        perm[k * b..(k + 1) * b].to_vec()
    }

    fn batch(&self, step: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let aug = &self.config.data.augment;
        let items: Vec<Sample> = self
            .batch_indices(step)
            .into_iter()
            .map(|i| {
                let s = &self.samples[i];
                if aug.flags.is_empty() {
                    s.clone()
                } else {
                    let seed = mix(mix(mix(self.config.seed, AUGMENT_STREAM), step as u64), i as u64);
                    augment(s, seed, aug)
                }
            })
            .collect();
        let refs: Vec<&Sample> = items.iter().collect();
        collate(&refs)
    }

    /// One Adam update. A non-finite loss aborts with
    /// [`Error::Divergence`] and leaves the parameters untouched.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let lr = self.config.lr_at(step, self.samples.len());
        let (images, masks) = self.batch(step)?;
        let pool_seed = mix(mix(self.config.seed, POOL_STREAM), step as u64);
        let ctx = Ctx::new(&self.state, Mode::Train, Grad::Track).with_seed(pool_seed);
        let fwd = self.network.forward(&ctx, &Var::constant(images))?;
        let loss = total_loss(
            &fwd.pyramid,
            &masks,
            &self.config.loss,
            self.config.model.ablation.deep_supervision,
        )?;
        let mut total = loss.total.value().item()? as f64;
        if self.nan_at == Some(step) {
            total = f64::NAN;
        }
        if !total.is_finite() {
            return Err(Error::Divergence { step, loss: total });
        }
        backward(&loss.total)?;
        let mut grads = HashMap::new();
        for (name, leaf) in ctx.leaves() {
            if let Some(g) = leaf.take_grad() {
                if !g.all_finite() {
                    return Err(Error::Divergence { step, loss: total });
                }
                grads.insert(name, g);
            }
        }
        drop(fwd);
        let n_maps = loss.terms.len() - 1;
        let log = StepLog {
            step,
            epoch: step / self.steps_per_epoch(),
            lr,
            total,
            terms: loss.terms[..n_maps].to_vec(),
            final_term: loss.final_term,
        };
        drop(loss);
        let updates = ctx.into_updates();
        self.adam.step(&mut self.state, &grads, lr)?;
        apply_bn_updates(&mut self.state, updates)?;
        self.step += 1;
        Ok(log)
    }

    /// Eval-mode metrics over the un-augmented training set.
    pub fn evaluate_train(&self) -> Result<EvalReport> {
        evaluate(&self.network, &self.state, &self.samples, self.config.batch_size)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step as u64,
            state: self.state.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Trains until the schedule, the step cap or the IoU target ends the
    /// run. With `out`, writes periodic checkpoints (only of finite states)
    /// and the per-step loss log.
    pub fn run(&mut self, out: Option<&Path>) -> Result<TrainReport> {
        let total = self.total_steps();
        let mut logs = Vec::new();
        let mut evals = Vec::new();
        let mut stop = if self.config.max_steps.is_some_and(|m| m == total) {
            StopReason::MaxSteps
        } else {
            StopReason::ScheduleComplete
        };
        let log_path = out.map(|d| d.join(LOSS_LOG_FILE));
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
        }
        while self.step < total {
            let entry = match self.train_step() {
                Ok(entry) => entry,
                Err(e) => {
                    if let Some(p) = &log_path {
                        write_log(p, &logs)?;
                    }
                    return Err(e);
                }
            };
            if entry.step % self.config.log_every == 0 {
                log::info!(
                    "step {} epoch {} lr {:.1e} loss {:.5} (final {:.5})",
                    entry.step,
                    entry.epoch,
                    entry.lr,
                    entry.total,
                    entry.final_term
                );
            }
            logs.push(entry);
            if let Some(target) = self.config.target_iou {
                if self.step % self.config.eval_every == 0 || self.step == total {
                    let m = self.evaluate_train()?.aggregate;
                    log::info!("step {} training IoU {:.4} F1 {:.4}", self.step, m.iou, m.f1);
                    evals.push(EvalLog { step: self.step, metrics: m });
                    if m.iou >= target {
                        stop = StopReason::TargetReached;
                        break;
                    }
                }
            }
            if let Some(dir) = out {
                if self.step % self.config.checkpoint_every == 0 {
                    self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
                    write_log(log_path.as_ref().expect("set with out"), &logs)?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            write_log(log_path.as_ref().expect("set with out"), &logs)?;
        }
        Ok(TrainReport {
            logs,
            evals,
            stop,
            steps: self.step,
        })
    }
}

/// Rewrites the CSV loss log with every entry so far.
fn write_log(path: &Path, logs: &[StepLog]) -> Result<()> {
    fs::write(path, loss_log_csv(logs))?;
    Ok(())
}

/// `step,epoch,lr,total,m1..mL,final` rows.
pub fn loss_log_csv(logs: &[StepLog]) -> String {
    let levels = logs.first().map_or(0, |l| l.terms.len());
    let mut out = String::from("step,epoch,lr,total");
    for i in 1..=levels {
        let _ = write!(out, ",m{i}");
    }
    out.push_str(",final\n");
    for l in logs {
        let _ = write!(out, "{},{},{:e},{:e}", l.step, l.epoch, l.lr, l.total);
        for t in &l.terms {
            let _ = write!(out, ",{t:e}");
        }
        let _ = writeln!(out, ",{:e}", l.final_term);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.model.base_channels = 2;
        cfg.model.input_size = (32, 32);
        cfg.data.synthetic = SyntheticSpec::roads(32, 0);
        cfg.data.train_samples = 6;
        cfg.batch_size = 2;
        cfg.max_steps = Some(4);
        cfg
    }

    fn trainer(cfg: RunConfig) -> Trainer {
        let (train, _) = load_data(&cfg).unwrap();
        Trainer::new(cfg, train).unwrap()
    }

    #[test]
    fn epoch_batches_partition_the_set() {
        let t = trainer(tiny_config());
        let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_indices(s)).collect();
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        assert_ne!(t.batch_indices(0), t.batch_indices(3));
    }

    #[test]
    fn steps_advance_and_log() {
        let mut t = trainer(tiny_config());
        let report = t.run(None).unwrap();
        assert_eq!(report.steps, 4);
        assert_eq!(report.stop, StopReason::MaxSteps);
        assert!(report.logs.iter().all(|l| l.total.is_finite() && l.terms.len() == 4));
        let l = &report.logs[0];
        let sum: f64 = l.terms.iter().sum::<f64>() + l.final_term;
        assert!((l.total - sum).abs() < 1e-5 * sum);
    }

    #[test]
    fn injected_divergence_leaves_state() {
        let mut t = trainer(tiny_config());
        t.train_step().unwrap();
        let before = t.state.clone();
        t.inject_nan_at(1);
        assert!(matches!(t.train_step(), Err(Error::Divergence { step: 1, .. })));
        assert_eq!(t.state, before);
        assert_eq!(t.step, 1);
    }

    #[test]
    fn rejects_wrong_sample_size() {
        let cfg = tiny_config();
        let mut other = cfg.clone();
        other.model.input_size = (64, 64);
        other.data.synthetic.size = (64, 64);
        let (train, _) = load_data(&other).unwrap();
        assert!(Trainer::new(cfg, train).is_err());
    }

    #[test]
    fn csv_header() {
        let log = StepLog { step: 0, epoch: 0, lr: 1e-3, total: 1.0, terms: vec![0.1, 0.2], final_term: 0.7 };
        assert!(loss_log_csv(&[log]).starts_with("step,epoch,lr,total,m1,m2,final\n"));
    }
}
