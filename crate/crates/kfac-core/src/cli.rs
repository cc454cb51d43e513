//! Command-line layer: flat-file config parsing, dataset ingestion
//! (synthetic Gaussian mixtures and IDX image files), CSV metrics emission,
//! and the four experiment commands. Single-threaded; all parallelism lives
//! in the trainer.

use std::fmt::Write as _;
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dist::{report_imbalance, Assignment};
use crate::error::{Error, Result};
use crate::kfac::{apply_schedules, KfacConfig, LayerKfacState};
use crate::linalg::{inverse, kron, vec_rows, Matrix};
use crate::nn::{backward, forward, Model};
use crate::trainer::{
    self, assign_model_factors, Execution, MetricsRow, ModelChoice, Optimizer, Placement,
    Precision, TrainConfig, TrainData, TrainOutcome,
};

/// Where training data comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Idx,
}

/// Dataset parameters resolved from config and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub difficulty: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            idx_images: None,
            idx_labels: None,
            n_samples: 2000,
            n_features: 16,
            n_classes: 5,
            difficulty: 1.0,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Everything a command needs: training hyper-parameters, data recipe,
/// output path, and benchmark length.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub metrics_out: Option<PathBuf>,
    pub bench_iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data: DataConfig::default(),
            metrics_out: None,
            bench_iterations: 100,
        }
    }
}

impl RunConfig {
    fn base() -> Self {
        RunConfig::default()
    }
}

/// Parse the flat `section.key = value` config grammar. `#` starts a
/// comment; blank lines are ignored; unknown keys and malformed values are
/// rejected with their line number. Absent keys keep documented defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::base();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or_else(|| Error::ConfigLine {
            line,
            message: format!("expected `section.key = value`, got `{stripped}`"),
        })?;
        set_key(&mut cfg, key.trim(), value.trim())
            .map_err(|message| Error::ConfigLine { line, message })?;
    }
    Ok(cfg)
}

/// Canonical text form of a config; `parse_config` of the output yields an
/// equal config. Keys with derived or empty defaults are omitted.
pub fn serialize_config(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let t = &cfg.train;
    let _ = writeln!(s, "train.epochs = {}", t.epochs);
    let _ = writeln!(s, "train.global_batch = {}", t.global_batch);
    let _ = writeln!(s, "train.base_lr = {}", t.base_lr);
    let _ = writeln!(s, "train.warmup_epochs = {}", t.warmup_epochs);
    if !t.lr_milestones.is_empty() {
        let _ = writeln!(s, "train.lr_milestones = {}", join(&t.lr_milestones));
    }
    let _ = writeln!(s, "train.lr_decay = {}", t.lr_decay);
    let _ = writeln!(s, "train.momentum = {}", t.momentum);
    let _ = writeln!(s, "train.label_smoothing = {}", t.label_smoothing);
    let _ = writeln!(s, "train.seed = {}", t.seed);
    let _ = writeln!(
        s,
        "train.optimizer = {}",
        match t.optimizer {
            Optimizer::Sgd => "sgd",
            Optimizer::KfacSgd => "kfac+sgd",
        }
    );
    let _ = writeln!(s, "train.world_size = {}", t.world_size);
    let _ = writeln!(
        s,
        "train.precision = {}",
        match t.precision {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    );
    let _ = writeln!(
        s,
        "train.execution = {}",
        match t.execution {
            Execution::Threaded => "threaded",
            Execution::Lockstep => "lockstep",
        }
    );
    let _ = writeln!(
        s,
        "train.placement = {}",
        match t.placement {
            Placement::RoundRobin => "roundrobin",
            Placement::SizeBalanced => "sized",
        }
    );
    let k = &t.kfac;
    let _ = writeln!(s, "kfac.damping = {}", k.damping);
    let _ = writeln!(s, "kfac.running_avg = {}", k.running_avg);
    let _ = writeln!(s, "kfac.kl_clip = {}", k.kl_clip);
    let _ = writeln!(s, "kfac.decomp_interval = {}", k.decomp_interval);
    if let Some(f) = k.factor_interval {
        let _ = writeln!(s, "kfac.factor_interval = {f}");
    }
    if !k.damping_decay.is_empty() {
        let _ = writeln!(s, "kfac.damping_decay = {}", join_pairs(&k.damping_decay));
    }
    if !k.interval_decay.is_empty() {
        let _ = writeln!(s, "kfac.interval_decay = {}", join_pairs(&k.interval_decay));
    }
    match &t.model {
        ModelChoice::Mlp { hidden } => {
            let _ = writeln!(s, "model.kind = mlp");
            // Always written: an empty list (no hidden layers) is a valid
            // architecture distinct from the default widths.
            let _ = writeln!(s, "model.widths = {}", join(hidden));
        }
        ModelChoice::SmallConv { in_channels } => {
            let _ = writeln!(s, "model.kind = smallconv");
            let _ = writeln!(s, "model.in_channels = {in_channels}");
        }
    }
    let d = &cfg.data;
    let _ = writeln!(
        s,
        "data.source = {}",
        match d.source {
            DataSource::Synthetic => "synthetic",
            DataSource::Idx => "idx",
        }
    );
    if let Some(p) = &d.idx_images {
        let _ = writeln!(s, "data.idx_images = {}", p.display());
    }
    if let Some(p) = &d.idx_labels {
        let _ = writeln!(s, "data.idx_labels = {}", p.display());
    }
    let _ = writeln!(s, "data.n_samples = {}", d.n_samples);
    let _ = writeln!(s, "data.n_features = {}", d.n_features);
    let _ = writeln!(s, "data.n_classes = {}", d.n_classes);
    let _ = writeln!(s, "data.difficulty = {}", d.difficulty);
    let _ = writeln!(s, "data.val_fraction = {}", d.val_fraction);
    let _ = writeln!(s, "data.seed = {}", d.seed);
    if let Some(p) = &cfg.metrics_out {
        let _ = writeln!(s, "out.metrics = {}", p.display());
    }
    let _ = writeln!(s, "bench.iterations = {}", cfg.bench_iterations);
    s
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn join_pairs(v: &[(usize, f64)]) -> String {
    v.iter().map(|(e, m)| format!("{e}:{m}")).collect::<Vec<_>>().join(",")
}

fn parse_num<T: std::str::FromStr>(value: &str, what: &str) -> std::result::Result<T, String> {
    value.parse::<T>().map_err(|_| format!("`{value}` is not a valid {what}"))
}

fn parse_list(value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|p| parse_num::<usize>(p.trim(), "integer")).collect()
}

fn parse_pairs(value: &str) -> std::result::Result<Vec<(usize, f64)>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|p| {
            let (e, m) = p
                .trim()
                .split_once(':')
                .ok_or_else(|| format!("`{p}` is not an `epoch:multiplier` pair"))?;
            Ok((parse_num::<usize>(e.trim(), "epoch")?, parse_num::<f64>(m.trim(), "multiplier")?))
        })
        .collect()
}

/// Apply one `section.key = value` assignment. Single-key range invariants
/// are enforced here so the caller can attach a line number; cross-key
/// invariants are checked when the run starts.
fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    match key {
        "train.epochs" => {
            cfg.train.epochs = parse_num(value, "integer")?;
            nonzero(cfg.train.epochs, "train.epochs")
        }
        "train.global_batch" => {
            cfg.train.global_batch = parse_num(value, "integer")?;
            nonzero(cfg.train.global_batch, "train.global_batch")
        }
        "train.base_lr" => {
            cfg.train.base_lr = parse_num(value, "number")?;
            positive(cfg.train.base_lr, "train.base_lr")
        }
        "train.warmup_epochs" => {
            cfg.train.warmup_epochs = parse_num(value, "integer")?;
            Ok(())
        }
        "train.lr_milestones" => {
            cfg.train.lr_milestones = parse_list(value)?;
            Ok(())
        }
        "train.lr_decay" => {
            cfg.train.lr_decay = parse_num(value, "number")?;
            in_unit_open_zero(cfg.train.lr_decay, "train.lr_decay")
        }
        "train.momentum" => {
            cfg.train.momentum = parse_num(value, "number")?;
            if (0.0..1.0).contains(&cfg.train.momentum) {
                Ok(())
            } else {
                Err(format!("train.momentum must lie in [0, 1), got {value}"))
            }
        }
        "train.label_smoothing" => {
            cfg.train.label_smoothing = parse_num(value, "number")?;
            if (0.0..=1.0).contains(&cfg.train.label_smoothing) {
                Ok(())
            } else {
                Err(format!("train.label_smoothing must lie in [0, 1], got {value}"))
            }
        }
        "train.seed" => {
            cfg.train.seed = parse_num(value, "integer")?;
            Ok(())
        }
        "train.optimizer" => {
            cfg.train.optimizer = match value {
                "sgd" => Optimizer::Sgd,
                "kfac+sgd" => Optimizer::KfacSgd,
                _ => return Err(format!("train.optimizer must be `sgd` or `kfac+sgd`, got `{value}`")),
            };
            Ok(())
        }
        "train.world_size" => {
            cfg.train.world_size = parse_num(value, "integer")?;
            nonzero(cfg.train.world_size, "train.world_size")
        }
        "train.precision" => {
            cfg.train.precision = match value {
                "f64" => Precision::F64,
                "f32" => Precision::F32,
                _ => return Err(format!("train.precision must be `f64` or `f32`, got `{value}`")),
            };
            Ok(())
        }
        "train.execution" => {
            cfg.train.execution = match value {
                "threaded" => Execution::Threaded,
                "lockstep" => Execution::Lockstep,
                _ => {
                    return Err(format!(
                        "train.execution must be `threaded` or `lockstep`, got `{value}`"
                    ))
                }
            };
            Ok(())
        }
        "train.placement" => {
            cfg.train.placement = parse_placement(value)?;
            Ok(())
        }
        "kfac.damping" => {
            cfg.train.kfac.damping = parse_num(value, "number")?;
            positive(cfg.train.kfac.damping, "kfac.damping")
        }
        "kfac.running_avg" => {
            cfg.train.kfac.running_avg = parse_num(value, "number")?;
            if (0.9..1.0).contains(&cfg.train.kfac.running_avg) {
                Ok(())
            } else {
                Err(format!("kfac.running_avg must lie in [0.9, 1), got {value}"))
            }
        }
        "kfac.kl_clip" => {
            cfg.train.kfac.kl_clip = parse_num(value, "number")?;
            positive(cfg.train.kfac.kl_clip, "kfac.kl_clip")
        }
        "kfac.decomp_interval" => {
            cfg.train.kfac.decomp_interval = parse_num(value, "integer")?;
            nonzero(cfg.train.kfac.decomp_interval, "kfac.decomp_interval")
        }
        "kfac.factor_interval" => {
            let f: usize = parse_num(value, "integer")?;
            nonzero(f, "kfac.factor_interval")?;
            cfg.train.kfac.factor_interval = Some(f);
            Ok(())
        }
        "kfac.damping_decay" => {
            cfg.train.kfac.damping_decay = parse_pairs(value)?;
            Ok(())
        }
        "kfac.interval_decay" => {
            cfg.train.kfac.interval_decay = parse_pairs(value)?;
            Ok(())
        }
        "model.kind" => {
            cfg.train.model = match value {
                "mlp" => match &cfg.train.model {
                    ModelChoice::Mlp { .. } => cfg.train.model.clone(),
                    _ => ModelChoice::Mlp { hidden: vec![64, 64] },
                },
                "smallconv" => match &cfg.train.model {
                    ModelChoice::SmallConv { .. } => cfg.train.model.clone(),
                    _ => ModelChoice::SmallConv { in_channels: 1 },
                },
                _ => return Err(format!("model.kind must be `mlp` or `smallconv`, got `{value}`")),
            };
            Ok(())
        }
        "model.widths" => {
            let widths = parse_list(value)?;
            if widths.iter().any(|&w| w == 0) {
                return Err("model.widths entries must be nonzero".into());
            }
            cfg.train.model = ModelChoice::Mlp { hidden: widths };
            Ok(())
        }
        "model.in_channels" => {
            let c: usize = parse_num(value, "integer")?;
            nonzero(c, "model.in_channels")?;
            cfg.train.model = ModelChoice::SmallConv { in_channels: c };
            Ok(())
        }
        "data.source" => {
            cfg.data.source = match value {
                "synthetic" => DataSource::Synthetic,
                "idx" => DataSource::Idx,
                _ => return Err(format!("data.source must be `synthetic` or `idx`, got `{value}`")),
            };
            Ok(())
        }
        "data.idx_images" => {
            cfg.data.idx_images = Some(PathBuf::from(value));
            Ok(())
        }
        "data.idx_labels" => {
            cfg.data.idx_labels = Some(PathBuf::from(value));
            Ok(())
        }
        "data.n_samples" => {
            cfg.data.n_samples = parse_num(value, "integer")?;
            nonzero(cfg.data.n_samples, "data.n_samples")
        }
        "data.n_features" => {
            cfg.data.n_features = parse_num(value, "integer")?;
            nonzero(cfg.data.n_features, "data.n_features")
        }
        "data.n_classes" => {
            cfg.data.n_classes = parse_num(value, "integer")?;
            if cfg.data.n_classes < 2 {
                return Err(format!("data.n_classes must be at least 2, got {value}"));
            }
            Ok(())
        }
        "data.difficulty" => {
            cfg.data.difficulty = parse_num(value, "number")?;
            if cfg.data.difficulty >= 0.0 && cfg.data.difficulty.is_finite() {
                Ok(())
            } else {
                Err(format!("data.difficulty must be a finite non-negative number, got {value}"))
            }
        }
        "data.val_fraction" => {
            cfg.data.val_fraction = parse_num(value, "number")?;
            if (0.0..1.0).contains(&cfg.data.val_fraction) {
                Ok(())
            } else {
                Err(format!("data.val_fraction must lie in [0, 1), got {value}"))
            }
        }
        "data.seed" => {
            cfg.data.seed = parse_num(value, "integer")?;
            Ok(())
        }
        "out.metrics" => {
            cfg.metrics_out = Some(PathBuf::from(value));
            Ok(())
        }
        "bench.iterations" => {
            cfg.bench_iterations = parse_num(value, "integer")?;
            nonzero(cfg.bench_iterations, "bench.iterations")
        }
        _ => Err(format!("unknown config key `{key}`")),
    }
}

fn parse_placement(value: &str) -> std::result::Result<Placement, String> {
    match value {
        "roundrobin" => Ok(Placement::RoundRobin),
        "sized" => Ok(Placement::SizeBalanced),
        _ => Err(format!("placement must be `roundrobin` or `sized`, got `{value}`")),
    }
}

fn nonzero(v: usize, key: &str) -> std::result::Result<(), String> {
    if v == 0 {
        Err(format!("{key} must be at least 1"))
    } else {
        Ok(())
    }
}

fn positive(v: f64, key: &str) -> std::result::Result<(), String> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("{key} must be positive and finite, got {v}"))
    }
}

fn in_unit_open_zero(v: f64, key: &str) -> std::result::Result<(), String> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(format!("{key} must lie in (0, 1], got {v}"))
    }
}

const CONFIG_KEY_HELP: &str = "\
Config file keys (section.key = value, `#` comments), with defaults:
  train.epochs = 10             train.global_batch = 32
  train.base_lr = 0.1           train.warmup_epochs = 5
  train.lr_milestones =         train.lr_decay = 0.1
  train.momentum = 0.9          train.label_smoothing = 0.1
  train.seed = 0                train.optimizer = sgd | kfac+sgd
  train.world_size = 1          train.precision = f64 | f32
  train.execution = threaded | lockstep
  train.placement = roundrobin | sized
  kfac.damping = 0.001          kfac.running_avg = 0.95
  kfac.kl_clip = 0.001          kfac.decomp_interval = 10
  kfac.factor_interval = (decomp_interval/10, min 1)
  kfac.damping_decay =          kfac.interval_decay =    (epoch:multiplier lists)
  model.kind = mlp | smallconv  model.widths = 64,64
  model.in_channels = 1
  data.source = synthetic | idx
  data.idx_images = PATH        data.idx_labels = PATH
  data.n_samples = 2000         data.n_features = 16
  data.n_classes = 5            data.difficulty = 1.0
  data.val_fraction = 0.2       data.seed = 0
  out.metrics = PATH            bench.iterations = 100
";

/// Command-line interface. Flags override config-file values; each flag maps
/// to exactly one config key.
#[derive(Debug, Parser)]
#[command(
    name = "kfac",
    about = "Distributed Kronecker-factored gradient preconditioning on a simulated cluster",
    after_help = CONFIG_KEY_HELP
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Config file in the flat `section.key = value` grammar.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Number of simulated workers (train.world_size).
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,

    /// Model architecture (model.kind).
    #[arg(long, global = true, value_parser = ["mlp", "smallconv"])]
    pub model: Option<String>,

    /// Data source: `synthetic` or `idx:IMAGES:LABELS` (data.source).
    #[arg(long, global = true, value_name = "SPEC")]
    pub dataset: Option<String>,

    /// Training epochs (train.epochs).
    #[arg(long, global = true, value_name = "N")]
    pub epochs: Option<usize>,

    /// Samples per optimization step across all workers (train.global_batch).
    #[arg(long, global = true, value_name = "N")]
    pub global_batch: Option<usize>,

    /// Base learning rate (train.base_lr).
    #[arg(long, global = true, value_name = "F")]
    pub lr: Option<f64>,

    /// Preconditioning on or off (train.optimizer).
    #[arg(long, global = true, value_parser = ["on", "off"])]
    pub kfac: Option<String>,

    /// Iterations between eigendecomposition refreshes (kfac.decomp_interval).
    #[arg(long, global = true, value_name = "N")]
    pub kfac_update_freq: Option<usize>,

    /// Damping γ added to factor eigenvalues (kfac.damping).
    #[arg(long, global = true, value_name = "F")]
    pub damping: Option<f64>,

    /// Seed for weights and shard shuffling (train.seed).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// CSV metrics output path (out.metrics).
    #[arg(long, global = true, value_name = "PATH")]
    pub metrics_out: Option<PathBuf>,

    /// Factor-to-worker placement policy (train.placement).
    #[arg(long, global = true, value_parser = ["roundrobin", "sized"])]
    pub placement: Option<String>,
}

#[derive(Clone, Copy, Debug, Subcommand)]
pub enum Command {
    /// Run a full training job and report final metrics.
    Train,
    /// Run the built-in numerical parity checks and print pass/fail lines.
    Verify,
    /// Count collective calls and element volumes on a tiny model.
    BenchComm,
    /// Print per-worker factor placement tables for both policies.
    PlacementReport,
}

/// Resolve the effective config: file (if given) first, then flag overrides,
/// routed through the same key-setter as the file parser.
pub fn resolve_config(args: &Cli) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            parse_config(&text)?
        }
        None => RunConfig::base(),
    };
    let mut flag = |key: &str, value: String, flag_name: &str| -> Result<()> {
        set_key(&mut cfg, key, &value)
            .map_err(|message| Error::Config(format!("flag {flag_name}: {message}")))
    };
    if let Some(w) = args.workers {
        flag("train.world_size", w.to_string(), "--workers")?;
    }
    if let Some(m) = &args.model {
        flag("model.kind", m.clone(), "--model")?;
    }
    if let Some(e) = args.epochs {
        flag("train.epochs", e.to_string(), "--epochs")?;
    }
    if let Some(b) = args.global_batch {
        flag("train.global_batch", b.to_string(), "--global-batch")?;
    }
    if let Some(lr) = args.lr {
        flag("train.base_lr", lr.to_string(), "--lr")?;
    }
    if let Some(k) = &args.kfac {
        let opt = if k == "on" { "kfac+sgd" } else { "sgd" };
        flag("train.optimizer", opt.to_string(), "--kfac")?;
    }
    if let Some(f) = args.kfac_update_freq {
        flag("kfac.decomp_interval", f.to_string(), "--kfac-update-freq")?;
    }
    if let Some(d) = args.damping {
        flag("kfac.damping", d.to_string(), "--damping")?;
    }
    if let Some(s) = args.seed {
        flag("train.seed", s.to_string(), "--seed")?;
    }
    if let Some(p) = &args.metrics_out {
        flag("out.metrics", p.display().to_string(), "--metrics-out")?;
    }
    if let Some(p) = &args.placement {
        flag("train.placement", p.clone(), "--placement")?;
    }
    if let Some(spec) = &args.dataset {
        if spec == "synthetic" {
            flag("data.source", "synthetic".into(), "--dataset")?;
        } else if let Some(rest) = spec.strip_prefix("idx:") {
            let (images, labels) = rest.split_once(':').ok_or_else(|| {
                Error::Config("--dataset idx form is `idx:IMAGES:LABELS`".into())
            })?;
            flag("data.source", "idx".into(), "--dataset")?;
            flag("data.idx_images", images.to_string(), "--dataset")?;
            flag("data.idx_labels", labels.to_string(), "--dataset")?;
        } else {
            return Err(Error::Config(format!(
                "--dataset must be `synthetic` or `idx:IMAGES:LABELS`, got `{spec}`"
            )));
        }
    }
    Ok(cfg)
}

/// Gaussian-mixture classification data: class `c` is centered at a seeded
/// random unit vector scaled by `difficulty`, with unit isotropic noise.
/// Classes cycle round-robin through the sample index, so any prefix/suffix
/// split stays balanced.
pub fn gen_synthetic(
    seed: u64,
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    difficulty: f64,
) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut centers = vec![0.0f64; n_classes * n_features];
    for c in 0..n_classes {
        let row = &mut centers[c * n_features..(c + 1) * n_features];
        let mut norm2 = 0.0;
        for v in row.iter_mut() {
            let z: f64 = normal.sample(&mut rng);
            *v = z;
            norm2 += z * z;
        }
        let scale = if norm2 > 0.0 { difficulty / norm2.sqrt() } else { 0.0 };
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    let mut x = Matrix::zeros(n_samples, n_features);
    let mut y = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let class = i % n_classes;
        for j in 0..n_features {
            let z: f64 = normal.sample(&mut rng);
            x[(i, j)] = centers[class * n_features + j] + z;
        }
        y.push(class);
    }
    (x, y)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images loaded from an IDX pair: one flattened row per image, pixels
/// scaled to [0, 1].
#[derive(Debug)]
pub struct IdxData {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

fn read_u32_be(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(Error::Data(format!("{}: truncated header", path.display())));
    }
    Ok(u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(buf)
}

/// Load an IDX image/label file pair: big-endian headers, magic 0x00000803
/// for the 3-d u8 image tensor and 0x00000801 for the label vector.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<IdxData> {
    let img = read_file(images_path)?;
    let magic = read_u32_be(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x} for images",
            images_path.display()
        )));
    }
    let n = read_u32_be(&img, 4, images_path)? as usize;
    let h = read_u32_be(&img, 8, images_path)? as usize;
    let w = read_u32_be(&img, 12, images_path)? as usize;
    let expected = 16 + n * h * w;
    if img.len() != expected {
        return Err(Error::Data(format!(
            "{}: {} bytes for {n} images of {h}x{w}, expected {expected}",
            images_path.display(),
            img.len()
        )));
    }

    let lab = read_file(labels_path)?;
    let magic = read_u32_be(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{}: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x} for labels",
            labels_path.display()
        )));
    }
    let n_lab = read_u32_be(&lab, 4, labels_path)? as usize;
    if lab.len() != 8 + n_lab {
        return Err(Error::Data(format!(
            "{}: {} bytes for {n_lab} labels, expected {}",
            labels_path.display(),
            lab.len(),
            8 + n_lab
        )));
    }
    if n_lab != n {
        return Err(Error::Data(format!(
            "{n} images in {} but {n_lab} labels in {}",
            images_path.display(),
            labels_path.display()
        )));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Data(format!("{}: empty image tensor", images_path.display())));
    }

    let mut x = Matrix::zeros(n, h * w);
    let dst = x.as_mut_slice();
    for (d, &b) in dst.iter_mut().zip(&img[16..]) {
        *d = b as f64 / 255.0;
    }
    let y: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    Ok(IdxData { x, y, height: h, width: w })
}

/// Split the tail `val_fraction` of the samples off as a validation set.
fn split_val(x: Matrix, y: Vec<usize>, n_classes: usize, val_fraction: f64) -> TrainData {
    let n = x.rows();
    let n_val = (n as f64 * val_fraction).floor() as usize;
    if n_val == 0 || n_val >= n {
        return TrainData { train_x: x, train_y: y, val: None, n_classes };
    }
    let n_train = n - n_val;
    let cols = x.cols();
    let src = x.as_slice();
    let mut train_x = Matrix::zeros(n_train, cols);
    train_x.as_mut_slice().copy_from_slice(&src[..n_train * cols]);
    let mut val_x = Matrix::zeros(n_val, cols);
    val_x.as_mut_slice().copy_from_slice(&src[n_train * cols..]);
    let val_y = y[n_train..].to_vec();
    let train_y = y[..n_train].to_vec();
    TrainData { train_x, train_y, val: Some((val_x, val_y)), n_classes }
}

/// Materialize the dataset described by the config.
pub fn build_dataset(cfg: &RunConfig) -> Result<TrainData> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let (x, y) = gen_synthetic(
                cfg.data.seed,
                cfg.data.n_samples,
                cfg.data.n_features,
                cfg.data.n_classes,
                cfg.data.difficulty,
            );
            Ok(split_val(x, y, cfg.data.n_classes, cfg.data.val_fraction))
        }
        DataSource::Idx => {
            let images = cfg.data.idx_images.as_ref().ok_or_else(|| {
                Error::Config("data.source = idx requires data.idx_images".into())
            })?;
            let labels = cfg.data.idx_labels.as_ref().ok_or_else(|| {
                Error::Config("data.source = idx requires data.idx_labels".into())
            })?;
            let idx = load_idx(images, labels)?;
            let n_classes = idx.y.iter().copied().max().map_or(0, |m| m + 1);
            if n_classes < 2 {
                return Err(Error::Data("label files needs at least two classes".into()));
            }
            Ok(split_val(idx.x, idx.y, n_classes, cfg.data.val_fraction))
        }
    }
}

/// Write the metrics stream as CSV. Floats are rendered with 9 significant
/// digits; NaN renders as `NaN`.
pub fn emit_report(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let body = render_csv(rows);
    fs::write(path, body)
        .map_err(|e| Error::Data(format!("cannot write metrics to {}: {e}", path.display())))
}

pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(
        "epoch,iteration,train_loss,train_acc,val_acc,lr,damping,decomp_interval,\
         allreduce_calls,allgather_calls,element_volume,wall_ms\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{},{},{},{},{:.8e}",
            r.epoch,
            r.iteration,
            r.train_loss,
            r.train_acc,
            r.val_acc,
            r.lr,
            r.damping,
            r.decomp_interval,
            r.allreduce_calls,
            r.allgather_calls,
            r.element_volume,
            r.wall_ms
        );
    }
    s
}

/// Entry point used by the binary: dispatch a parsed command line.
pub fn run(args: &Cli) -> Result<()> {
    match args.command {
        Command::Train => cmd_train(args),
        Command::Verify => cmd_verify(args),
        Command::BenchComm => cmd_bench_comm(args),
        Command::PlacementReport => cmd_placement_report(args),
    }
}

fn cmd_train(args: &Cli) -> Result<()> {
    let cfg = resolve_config(args)?;
    let data = build_dataset(&cfg)?;
    let started = Instant::now();
    let out = trainer::train(&cfg.train, &data)?;
    let secs = started.elapsed().as_secs_f64();
    print_outcome(&out, secs);
    if let Some(path) = &cfg.metrics_out {
        emit_report(&out.metrics, path)?;
        println!("metrics written to {}", path.display());
    }
    Ok(())
}

fn print_outcome(out: &TrainOutcome, secs: f64) {
    let last = out.metrics.last().expect("a run has at least one step");
    let val = if last.val_acc.is_nan() {
        "n/a".to_string()
    } else {
        format!("{:.4}", last.val_acc)
    };
    println!(
        "trained {} iterations in {secs:.2}s: loss {:.4}, train acc {:.4}, val acc {val}",
        out.metrics.len(),
        last.train_loss,
        last.train_acc
    );
    let c = &out.counters;
    println!(
        "collectives: allreduce {} calls / {} elements; allgather {} / {}; broadcast {} / {}",
        c.allreduce_calls,
        c.allreduce_volume,
        c.allgather_calls,
        c.allgather_volume,
        c.broadcast_calls,
        c.broadcast_volume
    );
}

/// Built-in parity checks: each line is one oracle comparison that must
/// hold to tight tolerance. Fails with a nonzero exit if any check fails.
fn cmd_verify(_args: &Cli) -> Result<()> {
    let mut all_ok = true;
    let mut check = |name: &str, result: std::result::Result<(), String>| {
        match result {
            Ok(()) => println!("PASS {name}"),
            Err(why) => {
                all_ok = false;
                println!("FAIL {name}: {why}");
            }
        }
    };
    check("kronecker worked example", verify_kron_example());
    check("eigen-path preconditioner vs dense inverse", verify_eigen_oracle());
    check("factored-inverse path agrees at zero damping", verify_factored_agreement());
    check("finite-difference gradient check", verify_grad_fd());
    check("single-worker run reproduces plain SGD", verify_sgd_parity());
    check("collective counters match closed form", verify_counter_closed_form());
    if all_ok {
        Ok(())
    } else {
        Err(Error::State("verification failed".into()))
    }
}

fn verify_kron_example() -> std::result::Result<(), String> {
    let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0][..]]).unwrap();
    let b = Matrix::from_rows(&[&[5.0, 6.0], &[7.0, 8.0], &[9.0, 0.0][..]]).unwrap();
    let k = kron(&a, &b).map_err(|e| e.to_string())?;
    let expected = Matrix::from_rows(&[
        &[5.0, 6.0, 10.0, 12.0][..],
        &[7.0, 8.0, 14.0, 16.0],
        &[9.0, 0.0, 18.0, 0.0],
        &[15.0, 18.0, 20.0, 24.0],
        &[21.0, 24.0, 28.0, 32.0],
        &[27.0, 0.0, 36.0, 0.0],
    ])
    .unwrap();
    if k == expected {
        Ok(())
    } else {
        Err("6x4 Kronecker product mismatch".into())
    }
}

fn random_spd(dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = StandardNormal;
    let mut b = Matrix::zeros(dim + 2, dim);
    for v in b.as_mut_slice() {
        let z: f64 = normal.sample(rng);
        *v = z;
    }
    let mut spd = b.gram();
    for i in 0..dim {
        spd[(i, i)] += 0.1;
    }
    spd
}

fn verify_eigen_oracle() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let normal = StandardNormal;
    for trial in 0..10 {
        let out_dim = 2 + trial % 4;
        let in_dim = 2 + (trial / 2) % 4;
        let a = random_spd(in_dim, &mut rng);
        let g = random_spd(out_dim, &mut rng);
        let mut grad = Matrix::zeros(out_dim, in_dim);
        for v in grad.as_mut_slice() {
            let z: f64 = normal.sample(&mut rng);
            *v = z;
        }
        for gamma in [0.0, 1e-3, 1.0] {
            let mut st = LayerKfacState::new(0);
            st.a_factor = Some(a.clone());
            st.g_factor = Some(g.clone());
            st.decompose().map_err(|e| e.to_string())?;
            let fast = st.precondition_eigen(&grad, gamma).map_err(|e| e.to_string())?;

            // Dense oracle: invert the full curvature plus damping.
            let mut dense = kron(&g, &a).map_err(|e| e.to_string())?;
            for i in 0..dense.rows() {
                dense[(i, i)] += gamma;
            }
            let inv = inverse(&dense).map_err(|e| e.to_string())?;
            let flat = inv.matmul(&vec_rows(&grad)).map_err(|e| e.to_string())?;
            let mut worst = 0.0f64;
            for (i, v) in fast.as_slice().iter().enumerate() {
                worst = worst.max((v - flat[(i, 0)]).abs());
            }
            if worst > 1e-8 {
                return Err(format!(
                    "trial {trial} gamma {gamma}: max deviation {worst:.2e} > 1e-8"
                ));
            }
        }
    }
    Ok(())
}

fn verify_factored_agreement() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let normal = StandardNormal;
    for trial in 0..10 {
        let a = random_spd(3, &mut rng);
        let g = random_spd(4, &mut rng);
        let mut grad = Matrix::zeros(4, 3);
        for v in grad.as_mut_slice() {
            let z: f64 = normal.sample(&mut rng);
            *v = z;
        }
        let mut st = LayerKfacState::new(0);
        st.a_factor = Some(a);
        st.g_factor = Some(g);
        st.decompose().map_err(|e| e.to_string())?;
        let eig = st.precondition_eigen(&grad, 0.0).map_err(|e| e.to_string())?;
        let fac = st.precondition_factored_inverse(&grad, 0.0).map_err(|e| e.to_string())?;
        let gap = eig.sub(&fac).map_err(|e| e.to_string())?.max_abs();
        if gap > 1e-6 {
            return Err(format!("trial {trial}: paths differ by {gap:.2e} at zero damping"));
        }
    }
    Ok(())
}

fn verify_grad_fd() -> std::result::Result<(), String> {
    let mut model = Model::mlp(3, &[4], 2, 99).map_err(|e| e.to_string())?;
    let (x, y) = gen_synthetic(5, 6, 3, 2, 1.0);
    let (_, mut cap) = forward(&model, &x, &y, 0.1).map_err(|e| e.to_string())?;
    let grads = backward(&model, &mut cap).map_err(|e| e.to_string())?;
    let ids = model.trainable_ids();
    let h = 1e-5;
    for (gi, &l) in ids.iter().enumerate() {
        let (rows, cols) = {
            let w = model.weight(l).unwrap();
            (w.rows(), w.cols())
        };
        for r in 0..rows {
            for c in 0..cols {
                let orig = model.weight(l).unwrap()[(r, c)];
                model.weight_mut(l).unwrap()[(r, c)] = orig + h;
                let (lp, _) = forward(&model, &x, &y, 0.1).map_err(|e| e.to_string())?;
                model.weight_mut(l).unwrap()[(r, c)] = orig - h;
                let (lm, _) = forward(&model, &x, &y, 0.1).map_err(|e| e.to_string())?;
                model.weight_mut(l).unwrap()[(r, c)] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[gi][(r, c)];
                let rel = (fd - an).abs() / an.abs().max(1e-6);
                if rel > 1e-5 {
                    return Err(format!(
                        "layer {l} weight ({r},{c}): analytic {an:.3e} vs fd {fd:.3e}"
                    ));
                }
            }
        }
    }
    Ok(())
}

fn verify_sgd_parity() -> std::result::Result<(), String> {
    let (x, y) = gen_synthetic(7, 32, 4, 3, 1.0);
    let data = TrainData { train_x: x, train_y: y, val: None, n_classes: 3 };
    let config = TrainConfig {
        epochs: 2,
        global_batch: 8,
        base_lr: 0.05,
        warmup_epochs: 0,
        model: ModelChoice::Mlp { hidden: vec![4] },
        seed: 5,
        ..TrainConfig::default()
    };
    let out = trainer::train(&config, &data).map_err(|e| e.to_string())?;
    let redo = trainer::train(
        &TrainConfig { execution: Execution::Lockstep, ..config },
        &data,
    )
    .map_err(|e| e.to_string())?;
    for (a, b) in out.metrics.iter().zip(&redo.metrics) {
        if a.train_loss.to_bits() != b.train_loss.to_bits() {
            return Err(format!(
                "step {}: threaded loss {} != lockstep loss {}",
                a.iteration, a.train_loss, b.train_loss
            ));
        }
    }
    Ok(())
}

fn verify_counter_closed_form() -> std::result::Result<(), String> {
    let (x, y) = gen_synthetic(7, 32, 4, 3, 1.0);
    let data = TrainData { train_x: x, train_y: y, val: None, n_classes: 3 };
    let config = TrainConfig {
        epochs: 3,
        global_batch: 8,
        base_lr: 0.05,
        warmup_epochs: 0,
        optimizer: Optimizer::KfacSgd,
        kfac: KfacConfig {
            decomp_interval: 4,
            factor_interval: Some(2),
            ..KfacConfig::default()
        },
        world_size: 2,
        model: ModelChoice::Mlp { hidden: vec![4] },
        seed: 5,
        ..TrainConfig::default()
    };
    let out = trainer::train(&config, &data).map_err(|e| e.to_string())?;
    let t = 12u64;
    let factor_calls = (t - 1) / 2 + 1;
    let decomp_calls = (t - 1) / 4 + 1;
    if out.counters.allreduce_calls != t + factor_calls {
        return Err(format!(
            "allreduce calls {} != {}",
            out.counters.allreduce_calls,
            t + factor_calls
        ));
    }
    if out.counters.allgather_calls != decomp_calls {
        return Err(format!(
            "allgather calls {} != {decomp_calls}",
            out.counters.allgather_calls
        ));
    }
    Ok(())
}

/// Communication accounting run: a deliberately tiny model (single input
/// feature, width-2 hidden layer) so the run is dominated by collective
/// bookkeeping, not math. Prints measured counters next to their closed
/// forms.
fn cmd_bench_comm(args: &Cli) -> Result<()> {
    let cfg = resolve_config(args)?;
    let t = cfg.bench_iterations;
    let world = cfg.train.world_size;
    let batch = 2 * world;
    let n = t * batch;
    let (x, y) = gen_synthetic(cfg.data.seed, n, 1, 2, 2.0);
    let data = TrainData { train_x: x, train_y: y, val: None, n_classes: 2 };
    let train_cfg = TrainConfig {
        epochs: 1,
        global_batch: batch,
        warmup_epochs: 0,
        lr_milestones: Vec::new(),
        model: ModelChoice::Mlp { hidden: vec![2] },
        ..cfg.train.clone()
    };
    train_cfg.validate()?;
    let out = trainer::train(&train_cfg, &data)?;

    // Closed forms for this geometry.
    let model = Model::mlp(1, &[2], 2, train_cfg.seed)?;
    let grad_elems: u64 = model
        .trainable_ids()
        .iter()
        .map(|&l| {
            let w = model.weight(l).unwrap();
            (w.rows() * w.cols()) as u64
        })
        .sum();
    let kfac_on = train_cfg.optimizer == Optimizer::KfacSgd;
    let eff = apply_schedules(&train_cfg.kfac, 0);
    let (factor_elems, gather_elems): (u64, u64) = model
        .trainable_ids()
        .iter()
        .map(|&l| {
            let w = model.weight(l).unwrap();
            let (a, g) = (w.cols() as u64, w.rows() as u64);
            (a * a + g * g, (a * a + a) + (g * g + g))
        })
        .fold((0, 0), |(f, e), (df, de)| (f + df, e + de));
    let tu = t as u64;
    let factor_calls = if kfac_on { (tu - 1) / eff.factor_interval as u64 + 1 } else { 0 };
    let decomp_calls = if kfac_on { (tu - 1) / eff.decomp_interval as u64 + 1 } else { 0 };

    println!(
        "bench-comm: {} workers, {} iterations, preconditioning {}",
        world,
        t,
        if kfac_on { "on" } else { "off" }
    );
    println!("collective     calls  measured-elems  expected-calls  expected-elems");
    let c = &out.counters;
    println!(
        "allreduce   {:>8}  {:>14}  {:>14}  {:>14}",
        c.allreduce_calls,
        c.allreduce_volume,
        tu + factor_calls,
        tu * grad_elems + factor_calls * factor_elems
    );
    println!(
        "allgather   {:>8}  {:>14}  {:>14}  {:>14}",
        c.allgather_calls,
        c.allgather_volume,
        decomp_calls,
        decomp_calls * gather_elems
    );
    println!(
        "broadcast   {:>8}  {:>14}  {:>14}  {:>14}",
        c.broadcast_calls, c.broadcast_volume, 1, grad_elems
    );
    println!("total volume {}", c.total_volume());
    if let Some(path) = &cfg.metrics_out {
        emit_report(&out.metrics, path)?;
        println!("metrics written to {}", path.display());
    }
    let ok = c.allreduce_calls == tu + factor_calls
        && c.allreduce_volume == tu * grad_elems + factor_calls * factor_elems
        && c.allgather_calls == decomp_calls
        && c.allgather_volume == decomp_calls * gather_elems
        && c.broadcast_calls == 1;
    if ok {
        println!("accounting matches closed form");
        Ok(())
    } else {
        Err(Error::State("measured counters do not match closed form".into()))
    }
}

fn cmd_placement_report(args: &Cli) -> Result<()> {
    let cfg = resolve_config(args)?;
    let data = build_dataset(&cfg)?;
    let model = match &cfg.train.model {
        ModelChoice::Mlp { hidden } => {
            Model::mlp(data.train_x.cols(), hidden, data.n_classes, cfg.train.seed)?
        }
        ModelChoice::SmallConv { in_channels } => {
            let hw = data.train_x.cols() / in_channels;
            let side = (hw as f64).sqrt().round() as usize;
            Model::smallconv(*in_channels, side, side, data.n_classes, cfg.train.seed)?
        }
    };
    let world = cfg.train.world_size;
    println!(
        "placement report: {} factors across {} workers",
        trainer::model_factor_descs(&model).len(),
        world
    );
    for placement in [Placement::RoundRobin, Placement::SizeBalanced] {
        let assignment = assign_model_factors(&model, world, placement)?;
        print_placement_table(placement, &assignment);
    }
    Ok(())
}

fn print_placement_table(placement: Placement, assignment: &Assignment) {
    let report = report_imbalance(assignment);
    println!(
        "\n{}:",
        match placement {
            Placement::RoundRobin => "round-robin",
            Placement::SizeBalanced => "size-balanced",
        }
    );
    println!("  rank  factors      params        cost  speedup");
    for w in &report.per_worker {
        let speedup = if w.speedup.is_finite() {
            format!("{:>7.2}", w.speedup)
        } else {
            "   idle".to_string()
        };
        println!(
            "  {:>4}  {:>7}  {:>10}  {:>10}  {speedup}",
            w.rank, w.n_factors, w.params, w.cost
        );
    }
    println!(
        "  total cost {}; speedup min {:.2} max {:.2}",
        report.total_cost,
        report.min_speedup(),
        report.max_speedup()
    );
}
