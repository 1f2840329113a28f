//! Finite-difference audit of every differentiable operation in 64-bit
//! precision.
//!
//! Each case projects the op output onto a fixed random tensor `r`, so the
//! scalar `L = Σ r ⊙ f(x)` exercises every output element. The analytic
//! gradient of `L` is compared with central differences using the
//! norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::damip_combine;
use crate::error::Result;
use crate::index_pooling::{depthwise_mix, index_pool_var};
use crate::loss_metrics::{bce_loss, combined_loss, nr_dice_loss, total_loss, LossConfig};
use crate::network::pooling::{avg_pool2, max_pool2, stochastic_pool2};
use crate::network::{Ablation, ModelConfig, Network};
use crate::nn::{Ctx, Grad, NetworkState};
use crate::tensor::kernels::ConvSpec;
use crate::tensor::ops::{self, BnRunning, Mode};
use crate::tensor::{backward, BackwardOp, Tensor, Var};

pub const OP_THRESHOLD: f64 = 1e-4;
pub const END_TO_END_THRESHOLD: f64 = 1e-3;
const STEP: f64 = 1e-6;

type OpFn = Box<dyn Fn(&[Var<f64>]) -> Result<Var<f64>>>;
type InputGen = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;

/// One registered check: the backward rule it audits (by op name), a label
/// for the configuration, an input generator and the function.
pub struct OpCase {
    pub op: &'static str,
    pub label: String,
    /// Inputs from this index on are held constant (targets, running
    /// statistics) and excluded from the comparison.
    pub differentiable: usize,
    pub gen: InputGen,
    pub f: OpFn,
}

impl OpCase {
    fn new(
        op: &'static str,
        label: &str,
        gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
        f: impl Fn(&[Var<f64>]) -> Result<Var<f64>> + 'static,
    ) -> Self {
        Self {
            op,
            label: label.to_string(),
            differentiable: usize::MAX,
            gen: Box::new(gen),
            f: Box::new(f),
        }
    }

    fn constant_from(mut self, index: usize) -> Self {
        self.differentiable = index;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub op: &'static str,
    pub label: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub threshold: f64,
    /// Set when the function itself failed to evaluate.
    pub error: Option<String>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_err <= self.threshold
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub cases: Vec<CaseResult>,
    pub end_to_end: CaseResult,
    /// Ops reachable from the network and loss graphs of every variant.
    pub graph_ops: BTreeSet<&'static str>,
    /// Graph ops with no registered case.
    pub uncovered: Vec<&'static str>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.uncovered.is_empty() && self.end_to_end.passed() && self.cases.iter().all(CaseResult::passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:<28} {:>5} {:>12} {:>9}  status", "op", "case", "n", "max rel err", "limit");
        for c in self.cases.iter().chain(std::iter::once(&self.end_to_end)) {
            let status = match (&c.error, c.passed()) {
                (Some(e), _) => format!("ERROR {e}"),
                (None, true) => "pass".into(),
                (None, false) => "FAIL".into(),
            };
            let _ = writeln!(
                out,
                "{:<20} {:<28} {:>5} {:>12.3e} {:>9.0e}  {status}",
                c.op, c.label, c.instances, c.max_rel_err, c.threshold
            );
        }
        let registered: BTreeSet<_> = self.cases.iter().map(|c| c.op).collect();
        let _ = writeln!(
            out,
            "coverage: {} registered ops; {} of {} graph ops covered",
            registered.len(),
            self.graph_ops.len() - self.uncovered.len(),
            self.graph_ops.len()
        );
        if !self.uncovered.is_empty() {
            let _ = writeln!(out, "uncovered: {}", self.uncovered.join(", "));
        }
        let _ = writeln!(out, "result: {}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

fn projected(f: &OpFn, inputs: &[Var<f64>], r: &Tensor<f64>) -> Result<f64> {
    Ok(f(inputs)?.value().dot(r)?)
}

/// Relative error of one random instance.
pub fn check_instance(case: &OpCase, rng: &mut ChaCha8Rng) -> Result<f64> {
    let inputs = (case.gen)(rng);
    let n_diff = case.differentiable.min(inputs.len());
    let vars: Vec<Var<f64>> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| if i < n_diff { Var::parameter(t.clone()) } else { Var::constant(t.clone()) })
        .collect();
    let y = (case.f)(&vars)?;
    let r = Tensor::randn(y.shape().to_vec(), 1.0, rng);
    let loss = ops::sum(&ops::mul(&y, &Var::constant(r.clone()))?);
    backward(&loss)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, x) in inputs.iter().enumerate().take(n_diff) {
        match vars[i].grad().as_ref() {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, x.len())),
        }
        for j in 0..x.len() {
            let eval = |delta: f64| -> Result<f64> {
                let consts: Vec<Var<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] += delta;
                        }
                        Var::constant(t)
                    })
                    .collect();
                projected(&case.f, &consts, &r)
            };
            numeric.push((eval(STEP)? - eval(-STEP)?) / (2.0 * STEP));
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

pub fn run_case(case: &OpCase, instances: usize, seed: u64) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut error = None;
    for _ in 0..instances {
        match check_instance(case, &mut rng) {
            Ok(e) => worst = worst.max(if e.is_nan() { f64::INFINITY } else { e }),
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    CaseResult {
        op: case.op,
        label: case.label.clone(),
        instances,
        max_rel_err: worst,
        threshold: OP_THRESHOLD,
        error,
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Normal samples pushed at least 0.1 away from zero, keeping ReLU kinks
/// out of reach of the finite-difference step.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    normal(shape, rng).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn unit(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

fn binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

/// Distinct values so 2×2 maxima are unique and well separated.
fn separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape.to_vec(), |i| idx[i] as f64 * 0.1 - n as f64 * 0.05)
}

fn conv_case(label: &str, cin: usize, cout: usize, spec: ConvSpec, bias: bool) -> OpCase {
    let k = spec.kernel;
    let wshape = [cout, cin / spec.groups, k, k];
    OpCase::new(
        "conv2d",
        label,
        move |rng| {
            let mut v = vec![normal(&[2, cin, 7, 6], rng), normal(&wshape, rng)];
            if bias {
                v.push(normal(&[cout], rng));
            }
            v
        },
        move |x| ops::conv2d(&x[0], &x[1], x.get(2), spec),
    )
}

fn bn_case(label: &str, mode: Mode) -> OpCase {
    OpCase::new(
        "batch_norm",
        label,
        |rng| {
            vec![
                normal(&[3, 2, 3, 3], rng),
                unit(&[2], 0.5, 1.5, rng),
                normal(&[2], rng),
                normal(&[2], rng),
                unit(&[2], 0.5, 2.0, rng),
            ]
        },
        move |x| {
            let running = BnRunning {
                mean: x[3].value().clone(),
                var: x[4].value().clone(),
            };
            Ok(ops::batch_norm(&x[0], &x[1], &x[2], &running, mode)?.0)
        },
    )
    .constant_from(3)
}

/// Every registered case.
pub fn registry() -> Vec<OpCase> {
    let loss = LossConfig::default();
    let mut cases = vec![
        conv_case("3x3 pad 1 + bias", 3, 4, ConvSpec::new(3, 1, 1, 1), true),
        conv_case("7x7 stride 2 pad 3", 3, 2, ConvSpec::new(7, 2, 3, 1), false),
        conv_case("3x3 dilation 2", 2, 3, ConvSpec::new(3, 1, 2, 2), false),
        conv_case("1x1 + bias", 4, 3, ConvSpec::new(1, 1, 0, 1), true),
        conv_case("depthwise 3x3", 4, 4, ConvSpec::new(3, 1, 1, 1).with_groups(4), false),
        OpCase::new(
            "conv2d",
            "depthwise_mix",
            |rng| vec![normal(&[2, 3, 4, 4], rng), normal(&[3, 1, 3, 3], rng)],
            |x| depthwise_mix(&x[0], &x[1]),
        ),
        OpCase::new(
            "transposed_conv2d",
            "4x4 stride 2 pad 1 + bias",
            |rng| vec![normal(&[2, 3, 3, 4], rng), normal(&[3, 2, 4, 4], rng), normal(&[2], rng)],
            |x| ops::transposed_conv2d(&x[0], &x[1], Some(&x[2]), ConvSpec::new(4, 2, 1, 1)),
        ),
        bn_case("train", Mode::Train),
        bn_case("eval", Mode::Eval),
        OpCase::new("relu", "", |rng| vec![off_zero(&[2, 3, 4, 4], rng)], |x| Ok(ops::relu(&x[0]))),
        OpCase::new("sigmoid", "", |rng| vec![normal(&[2, 3, 4, 4], rng)], |x| Ok(ops::sigmoid(&x[0]))),
        OpCase::new(
            "add",
            "pair",
            |rng| vec![normal(&[2, 2, 3, 3], rng), normal(&[2, 2, 3, 3], rng)],
            |x| ops::add(&x[0], &x[1]),
        ),
        OpCase::new(
            "add",
            "add_all of 3",
            |rng| (0..3).map(|_| normal(&[1, 2, 3, 3], rng)).collect(),
            ops::add_all,
        ),
        OpCase::new(
            "mul",
            "",
            |rng| vec![normal(&[2, 2, 3, 3], rng), normal(&[2, 2, 3, 3], rng)],
            |x| ops::mul(&x[0], &x[1]),
        ),
        OpCase::new("scale", "", |rng| vec![normal(&[2, 2, 3, 3], rng)], |x| Ok(ops::scale(&x[0], -1.7))),
        OpCase::new(
            "mul_groups",
            "4 slices",
            |rng| vec![normal(&[2, 8, 3, 3], rng), unit(&[2, 4, 3, 3], 0.0, 1.0, rng)],
            |x| ops::mul_groups(&x[0], &x[1]),
        ),
        OpCase::new(
            "mul_groups",
            "broadcast map",
            |rng| vec![normal(&[2, 3, 3, 3], rng), unit(&[2, 1, 3, 3], 0.0, 1.0, rng)],
            |x| ops::mul_groups(&x[0], &x[1]),
        ),
        OpCase::new(
            "scale_channels",
            "",
            |rng| vec![normal(&[2, 3, 4, 4], rng), unit(&[2, 3, 1, 1], 0.0, 1.0, rng)],
            |x| ops::scale_channels(&x[0], &x[1]),
        ),
        OpCase::new(
            "global_avg_pool",
            "",
            |rng| vec![normal(&[2, 3, 4, 5], rng)],
            |x| ops::global_avg_pool(&x[0]),
        ),
        OpCase::new(
            "bilinear_upsample",
            "x2",
            |rng| vec![normal(&[2, 2, 3, 4], rng)],
            |x| ops::bilinear_upsample(&x[0], (6, 8)),
        ),
        OpCase::new(
            "bilinear_upsample",
            "3x3 to 7x5",
            |rng| vec![normal(&[1, 2, 3, 3], rng)],
            |x| ops::bilinear_upsample(&x[0], (7, 5)),
        ),
        OpCase::new(
            "concat_channels",
            "",
            |rng| vec![normal(&[2, 1, 3, 3], rng), normal(&[2, 3, 3, 3], rng)],
            |x| ops::concat_channels(x),
        ),
        OpCase::new("sum", "", |rng| vec![normal(&[2, 3, 3, 3], rng)], |x| Ok(ops::sum(&x[0]))),
        OpCase::new("sum", "mean", |rng| vec![normal(&[2, 3, 3, 3], rng)], |x| Ok(ops::mean(&x[0]))),
        OpCase::new(
            "index_pool",
            "k=2",
            |rng| vec![normal(&[2, 3, 4, 6], rng)],
            |x| index_pool_var(&x[0], 2),
        ),
        OpCase::new(
            "index_pool",
            "k=3",
            |rng| vec![normal(&[1, 2, 6, 3], rng)],
            |x| index_pool_var(&x[0], 3),
        ),
        OpCase::new(
            "mul_groups",
            "damip combine",
            |rng| vec![normal(&[2, 3, 4, 4], rng), unit(&[2, 1, 4, 4], 0.1, 0.9, rng)],
            |x| damip_combine(&x[0], &x[1]),
        ),
        OpCase::new("max_pool2", "", |rng| vec![separated(&[2, 2, 4, 4], rng)], |x| max_pool2(&x[0])),
        OpCase::new("avg_pool2", "", |rng| vec![normal(&[2, 2, 4, 4], rng)], |x| avg_pool2(&x[0])),
        OpCase::new(
            "stochastic_pool2",
            "eval",
            |rng| vec![off_zero(&[2, 2, 4, 4], rng)],
            |x| stochastic_pool2(&x[0], Mode::Eval, || 0.0),
        ),
        OpCase::new(
            "stochastic_pool2",
            "train, fixed draws",
            |rng| vec![unit(&[2, 2, 4, 4], 0.2, 1.0, rng)],
            |x| {
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                stochastic_pool2(&x[0], Mode::Train, || rng.random::<f64>())
            },
        ),
    ];
    for (label, cfg) in [
        ("mean", loss),
        ("sum", LossConfig { bce_reduction: crate::loss_metrics::Reduction::Sum, ..loss }),
    ] {
        cases.push(OpCase::new(
            "bce_loss",
            label,
            |rng| vec![unit(&[2, 1, 4, 4], 0.05, 0.95, rng), binary(&[2, 1, 4, 4], rng)],
            move |x| bce_loss(&x[0], x[1].value(), &cfg),
        )
        .constant_from(1));
    }
    for gamma in [1.0, 1.5, 2.0] {
        let cfg = LossConfig { gamma, ..loss };
        cases.push(OpCase::new(
            "nr_dice_loss",
            &format!("gamma {gamma}"),
            |rng| vec![unit(&[2, 1, 4, 4], 0.05, 0.95, rng), binary(&[2, 1, 4, 4], rng)],
            move |x| nr_dice_loss(&x[0], x[1].value(), &cfg),
        )
        .constant_from(1));
    }
    cases.push(OpCase::new(
        "add",
        "combined loss",
        |rng| vec![unit(&[1, 1, 4, 4], 0.05, 0.95, rng), binary(&[1, 1, 4, 4], rng)],
        move |x| combined_loss(&x[0], x[1].value(), &loss),
    )
    .constant_from(1));
    cases
}

/// A deliberately wrong backward rule (10% too large), used as a negative
/// control for the audit itself.
struct CorruptedScale;

impl BackwardOp<f64> for CorruptedScale {
    fn name(&self) -> &'static str {
        "corrupted_scale"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<f64>],
        _output: &Tensor<f64>,
        grad: &Tensor<f64>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<f64>>>> {
        Ok(vec![Some(grad.map(|g| 2.0 * g * 1.1))])
    }
}

#[doc(hidden)]
pub fn corrupted_case() -> OpCase {
    OpCase::new(
        "corrupted_scale",
        "negative control",
        |rng| vec![normal(&[1, 2, 3, 3], rng)],
        |x| Ok(Var::from_op(x[0].value().map(|v| 2.0 * v), &[&x[0]], CorruptedScale)),
    )
}

/// Small network used by the end-to-end check.
pub fn end_to_end_model() -> ModelConfig {
    ModelConfig {
        base_channels: 2,
        input_size: (32, 32),
        ..ModelConfig::paper()
    }
}

fn network_loss(
    net: &Network,
    state: &NetworkState<f64>,
    image: &Tensor<f64>,
    gt: &Tensor<f64>,
    grad: Grad,
) -> Result<(Var<f64>, Vec<(String, Var<f64>)>)> {
    let ctx = Ctx::new(state, Mode::Train, grad).with_seed(5);
    let out = net.forward(&ctx, &Var::constant(image.clone()))?;
    let loss = total_loss(&out.pyramid, gt, &LossConfig::default(), net.config.ablation.deep_supervision)?;
    let leaves = ctx.leaves().into_iter().collect();
    Ok((loss.total, leaves))
}

/// Offsets every parameter by up to `JITTER` so the check runs at a generic
/// point. Zero-initialized biases otherwise leave residual sums at exactly
/// zero wherever both branches are switched off, a ReLU kink that no finite
/// difference resolves.
const JITTER: f64 = 1e-3;

/// Sampled-parameter check of the full network and total loss in train
/// mode: one random coordinate from every parameter tensor plus `extra`
/// more drawn uniformly over all parameters.
pub fn check_end_to_end(config: &ModelConfig, extra: usize, seed: u64) -> CaseResult {
    let run = || -> Result<(usize, f64)> {
        let net = Network::new(config)?;
        let mut state: NetworkState<f64> = net.init_state(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let names: Vec<String> = state.params().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            for v in state.tensor_mut(name)?.data_mut() {
                *v += rng.random_range(-JITTER..JITTER);
            }
        }
        let (h, w) = config.input_size;
        let image = unit(&[2, 3, h, w], 0.0, 1.0, &mut rng);
        let gt = binary(&[2, 1, h, w], &mut rng);
        let (loss, leaves) = network_loss(&net, &state, &image, &gt, Grad::Track)?;
        backward(&loss)?;
        let grads: std::collections::HashMap<String, Tensor<f64>> = leaves
            .into_iter()
            .filter_map(|(n, v)| v.take_grad().map(|g| (n, g)))
            .collect();
        let params: Vec<(String, usize)> = state.params().map(|(n, t)| (n.to_string(), t.len())).collect();
        let mut coords: Vec<(String, usize)> =
            params.iter().map(|(n, len)| (n.clone(), rng.random_range(0..*len))).collect();
        let total: usize = params.iter().map(|(_, l)| l).sum();
        for _ in 0..extra {
            let mut k = rng.random_range(0..total);
            for (n, len) in &params {
                if k < *len {
                    coords.push((n.clone(), k));
                    break;
                }
                k -= len;
            }
        }
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for (name, j) in &coords {
            analytic.push(grads.get(name).map_or(0.0, |g| g.data()[*j]));
            let eval = |delta: f64| -> Result<f64> {
                let mut s = state.clone();
                s.tensor_mut(name)?.data_mut()[*j] += delta;
                Ok(network_loss(&net, &s, &image, &gt, Grad::Off)?.0.value().item()?)
            };
            numeric.push((eval(STEP)? - eval(-STEP)?) / (2.0 * STEP));
        }
        Ok((coords.len(), rel_err(&analytic, &numeric)))
    };
    let (instances, max_rel_err, error) = match run() {
        Ok((n, e)) => (n, e, None),
        Err(e) => (0, f64::INFINITY, Some(e.to_string())),
    };
    CaseResult {
        op: "network",
        label: format!("end-to-end C={} {}x{}", config.base_channels, config.input_size.0, config.input_size.1),
        instances,
        max_rel_err,
        threshold: END_TO_END_THRESHOLD,
        error,
    }
}

/// Differentiable ops reachable from the total loss of every ablation
/// variant of a small network.
pub fn graph_ops() -> Result<BTreeSet<&'static str>> {
    let mut names = BTreeSet::new();
    for v in Ablation::VARIANTS {
        let config = ModelConfig {
            base_channels: 2,
            input_size: (32, 32),
            ablation: Ablation::variant(v)?,
            ..ModelConfig::paper()
        };
        let net = Network::new(&config)?;
        let state: NetworkState<f64> = net.init_state(0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = unit(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
        let gt = binary(&[1, 1, 32, 32], &mut rng);
        names.extend(network_loss(&net, &state, &image, &gt, Grad::Track)?.0.op_names());
    }
    Ok(names)
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub end_to_end_extra: usize,
    pub seed: u64,
    /// Adds the corrupted negative-control case.
    pub include_corrupted: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 10,
            end_to_end_extra: 100,
            seed: 0,
            include_corrupted: false,
        }
    }
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut cases = registry();
    if opts.include_corrupted {
        cases.push(corrupted_case());
    }
    let results: Vec<CaseResult> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| run_case(c, opts.instances, opts.seed.wrapping_add(i as u64)))
        .collect();
    let graph_ops = graph_ops()?;
    let registered: BTreeSet<_> = cases.iter().map(|c| c.op).collect();
    let uncovered = graph_ops.difference(&registered).copied().collect();
    Ok(GradcheckReport {
        cases: results,
        end_to_end: check_end_to_end(&end_to_end_model(), opts.end_to_end_extra, opts.seed),
        graph_ops,
        uncovered,
    })
}
