//! `mssdmpa` command-line interface.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mssdmpa::checkpoint::Checkpoint;
use mssdmpa::config::RunConfig;
use mssdmpa::data::{load_dir, load_image};
use mssdmpa::evaluate::{evaluate, predict, write_prediction, EvalReport};
use mssdmpa::gradcheck::{self, GradcheckOptions};
use mssdmpa::network::{Ablation, Network};
use mssdmpa::train::{load_data, Trainer, CHECKPOINT_FILE};
use mssdmpa::Error;

/// Exit statuses besides 0 (success) and 2 (usage or configuration error).
mod exit {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const DIVERGENCE: u8 = 4;
    pub const CHECKPOINT: u8 = 5;
    pub const AUDIT_FAILED: u8 = 6;
}

#[derive(Parser)]
#[command(name = "mssdmpa", version, about = "Multi-path segmentation network: training, evaluation and audits")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch or resume from a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled image set.
    Evaluate(EvaluateArgs),
    /// Write probability maps for images as grayscale PNGs.
    Predict(PredictArgs),
    /// Finite-difference audit of every backward rule and the full network.
    Gradcheck(GradcheckArgs),
    /// Print the shape of every named intermediate tensor.
    Shapes(ShapesArgs),
    /// Train each single-component ablation variant for a fixed number of steps.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` configuration file; its `profile` key picks the base.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile when no config file is given: `desk` or `paper`.
    #[arg(long)]
    profile: Option<String>,
    /// Override a configuration key, e.g. `--set model.channels=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self, default_profile: &str) -> Result<RunConfig, Error> {
        let mut cfg = match (&self.config, &self.profile) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("--config and --profile are mutually exclusive".into()));
            }
            (Some(path), None) => RunConfig::load(path)?,
            (None, p) => RunConfig::profile(p.as_deref().unwrap_or(default_profile))?,
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Error> {
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Continue from this checkpoint; its configuration is authoritative.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Force a non-finite loss at this step.
    #[arg(long, hide = true)]
    inject_nan_at: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Take data settings from this file instead of the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labelled directory (`images/`, `masks/`) instead of the configured data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which configured split to score when `--data` is absent.
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Writes `metrics.csv` and `report.txt` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file, or a directory of PNGs.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the intermediate maps `m1 … mL`.
    #[arg(long)]
    pyramid: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per registered case.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Extra end-to-end coordinates beyond one per parameter tensor.
    #[arg(long, default_value_t = 100)]
    extra: usize,
    /// Writes `gradcheck.txt` here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Adds a case with a deliberately wrong backward rule.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct ShapesArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Ablation variant to build (see `ablate`).
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Comma-separated variants; defaults to all.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Shapes(a) => shapes(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => exit::CONFIG,
        Error::MissingFile(_) | Error::UnsupportedImage { .. } | Error::ExtentMismatch { .. } | Error::Image(_) => {
            exit::DATA
        }
        Error::Divergence { .. } => exit::DIVERGENCE,
        Error::Checkpoint(_) | Error::CheckpointVersion { .. } => exit::CHECKPOINT,
        _ => exit::OTHER,
    }
}

fn train(a: TrainArgs) -> Result<u8, Error> {
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut ck = Checkpoint::load(path)?;
            a.cfg.apply(&mut ck.config)?;
            let (train, _) = load_data(&ck.config)?;
            info!("resuming from {} at step {}", path.display(), ck.step);
            Trainer::resume(ck, train)?
        }
        None => {
            let cfg = a.cfg.resolve("desk")?;
            let (train, _) = load_data(&cfg)?;
            Trainer::new(cfg, train)?
        }
    };
    if let Some(step) = a.inject_nan_at {
        trainer.inject_nan_at(step);
    }
    let out = trainer.config.out_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), trainer.config.to_text())?;
    info!(
        "training {} samples for {} steps into {}",
        trainer.samples().len(),
        trainer.total_steps(),
        out.display()
    );
    let report = trainer.run(Some(&out))?;
    info!("stopped after {} steps ({:?})", report.steps, report.stop);

    let (_, test) = load_data(&trainer.config)?;
    let sets = [("train", trainer.samples().to_vec()), ("test", test)];
    for (split, samples) in sets.iter().filter(|(_, s)| !s.is_empty()) {
        let r = evaluate(&trainer.network, &trainer.state, samples, trainer.config.batch_size)?;
        fs::write(out.join(format!("metrics_{split}.csv")), r.to_csv())?;
        println!("{split}: IoU {:.4} F1 {:.4}", r.aggregate.iou, r.aggregate.f1);
    }
    println!("checkpoint: {}", out.join(CHECKPOINT_FILE).display());
    Ok(0)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<u8, Error> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let samples = match (&a.data, &a.config) {
        (Some(dir), _) => load_dir(dir)?,
        (None, cfg_path) => {
            let mut cfg = ck.config.clone();
            if let Some(p) = cfg_path {
                cfg.data = RunConfig::load(p)?.data;
            }
            let (train, test) = load_data(&cfg)?;
            if a.split == "train" {
                train
            } else {
                test
            }
        }
    };
    if samples.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    let net = Network::new(&ck.config.model)?;
    let report = evaluate(&net, &ck.state, &samples, a.batch)?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        write_report(out, &report)?;
    }
    Ok(0)
}

fn write_report(out: &Path, report: &EvalReport) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), report.to_csv())?;
    fs::write(out.join("report.txt"), report.to_text())?;
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<u8, Error> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let net = Network::new(&ck.config.model)?;
    let images = if a.image.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(&a.image)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::MissingFile(a.image.join("*.png")));
        }
        v
    } else {
        vec![a.image.clone()]
    };
    for path in &images {
        let image = load_image(path)?;
        let pred = predict(&net, &ck.state, &image)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for p in write_prediction(&pred, &a.out, &stem, a.pyramid)? {
            println!("{}", p.display());
        }
    }
    Ok(0)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<u8, Error> {
    let report = gradcheck::run(&GradcheckOptions {
        instances: a.instances,
        end_to_end_extra: a.extra,
        seed: a.seed,
        include_corrupted: a.inject_fault,
    })?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("gradcheck.txt"), &text)?;
    }
    Ok(if report.passed() { 0 } else { exit::AUDIT_FAILED })
}

fn shapes(a: ShapesArgs) -> Result<u8, Error> {
    let mut cfg = a.cfg.resolve("paper")?;
    if let Some(v) = &a.ablation {
        cfg.model.ablation = Ablation::variant(v)?;
    }
    let net = Network::new(&cfg.model)?;
    let (h, w) = cfg.model.input_size;
    let mut table = format!(
        "# C = {}, L = {}, input {h}x{w}, variant {}\n",
        cfg.model.base_channels,
        cfg.model.paths,
        variant_name(cfg.model.ablation)
    );
    for (name, shape) in net.shape_trace()? {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(table, "{name:<6} ({})", dims.join(", "));
    }
    print!("{table}");
    if let Some(out) = &a.cfg.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("shapes.txt"), &table)?;
    }
    Ok(0)
}

fn variant_name(a: Ablation) -> &'static str {
    Ablation::VARIANTS
        .into_iter()
        .find(|v| Ablation::variant(v).is_ok_and(|b| b == a))
        .unwrap_or("custom")
}

fn ablate(a: AblateArgs) -> Result<u8, Error> {
    let base = a.cfg.resolve("desk")?;
    let variants: Vec<String> = if a.variants.is_empty() {
        Ablation::VARIANTS.iter().map(|v| v.to_string()).collect()
    } else {
        a.variants.clone()
    };
    let (train, _) = load_data(&base)?;
    let mut table = String::from("variant,steps,first_loss,last_loss,train_iou\n");
    for v in &variants {
        let mut cfg = base.clone();
        cfg.model.ablation = Ablation::variant(v)?;
        cfg.max_steps = Some(a.steps);
        cfg.target_iou = None;
        info!("variant {v}: {} steps", a.steps);
        let mut trainer = Trainer::new(cfg, train.clone())?;
        let out = base.out_dir.join(v);
        let report = trainer.run(Some(&out))?;
        let iou = trainer.evaluate_train()?.aggregate.iou;
        let first = report.logs.first().map_or(f64::NAN, |l| l.total);
        let last = report.logs.last().map_or(f64::NAN, |l| l.total);
        let _ = writeln!(table, "{v},{},{first:.6},{last:.6},{iou:.4}", report.steps);
    }
    print!("{table}");
    fs::create_dir_all(&base.out_dir)?;
    fs::write(base.out_dir.join("ablation.csv"), &table)?;
    Ok(0)
}
