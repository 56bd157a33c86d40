//! The `sure-denoise` command line: strict JSON configs, flag overrides and
//! stable exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{
    extract_patches, generate_synthetic, load_mnist_idx, psnr, read_pgm, write_pgm, DataError, Dataset,
    ImageShape, Manifest, ManifestEntry, SyntheticKind,
};
use crate::nn::{Architecture, ConstantDenoiser, Denoiser, IdentityDenoiser, LinearDenoiser, NnError};
use crate::noise::{NoiseRng, NoiseSpec, Stream};
use crate::oracle::{
    epsilon_sweep, validate_divergence, validate_pure, validate_unbiasedness, write_reports, DivergenceCheck,
    OracleError, OracleReport, RiskCheck, Tolerance, STDERR_MULTIPLE,
};
use crate::risk::{epsilon_rule, ObjectiveKind, RiskError, RiskObjective, FD_STEP, PURE_EPSILON};
use crate::tensor::{Tensor, TensorError};
use crate::train::{
    refine, resume, train, write_csv, LrSchedule, NoiseRefresh, OptimizerKind, ProbePolicy, RefineConfig,
    TrainConfig, TrainData, TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_VALIDATION: i32 = 5;

/// Corruption round used for validation images, far from any training round.
pub const VALIDATION_ROUND: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("validation failed: {0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Validation(_) => EXIT_VALIDATION,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::InvalidArchitecture(_) => CliError::Config(e.to_string()),
            NnError::Tensor(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RiskError> for CliError {
    fn from(e: RiskError) -> Self {
        match e {
            RiskError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            RiskError::InvalidParameter { .. } | RiskError::MissingGroundTruth(_) | RiskError::UnknownObjective(_) => CliError::Config(e.to_string()),
            RiskError::Denoiser(n) => n.into(),
            RiskError::Tensor(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::MissingGroundTruth { .. } => CliError::Config(e.to_string()),
            TrainError::NumericalAbort { .. } => CliError::Numerical(e.to_string()),
            TrainError::Risk(r) => r.into(),
            TrainError::Denoiser(n) => n.into(),
            TrainError::Tensor(t) => t.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Csv(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::TooLarge { .. } | OracleError::Invalid(_) => CliError::Config(e.to_string()),
            OracleError::Risk(r) => r.into(),
            OracleError::Train(t) => t.into(),
            OracleError::Tensor(t) => t.into(),
            OracleError::Noise(_) | OracleError::Io { .. } => CliError::Data(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "sure-denoise", version, about = "Train and refine image denoisers without clean targets")]
pub struct Cli {
    /// Worker threads for oracle evaluations (training is single-threaded).
    #[arg(long, global = true, env = "SURE_DENOISE_THREADS", default_value_t = 1)]
    pub threads: usize,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Add noise to a dataset and write PGM files plus a manifest.
    Corrupt(CorruptArgs),
    /// Train a denoiser.
    Train(TrainArgs),
    /// Fine-tune a trained denoiser on one noisy image.
    Refine(RefineArgs),
    /// Run a checkpoint on PGM images.
    Denoise(DenoiseArgs),
    /// Run oracle suites against the risk estimators.
    Validate(ValidateArgs),
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// MNIST IDX files (optionally gzip-compressed); clean images.
    MnistIdx {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        limit: Option<usize>,
    },
    /// A manifest written by `corrupt`.
    Manifest {
        path: PathBuf,
        /// Load the clean images when the manifest lists them.
        #[serde(default = "default_true")]
        with_clean: bool,
    },
    /// Clean PGM images of identical size.
    Pgm { paths: Vec<PathBuf> },
    Synthetic {
        kind: SyntheticKind,
        count: usize,
        #[serde(default = "default_size")]
        height: usize,
        #[serde(default = "default_size")]
        width: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_true() -> bool {
    true
}

fn default_size() -> usize {
    28
}

fn require_file(field: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{field}: {} does not exist", path.display())))
    }
}

impl DatasetSource {
    /// `field` names the config key in error messages.
    pub fn check(&self, field: &str) -> Result<()> {
        match self {
            DatasetSource::MnistIdx { images, labels, .. } => {
                require_file(&format!("{field}.images"), images)?;
                if let Some(l) = labels {
                    require_file(&format!("{field}.labels"), l)?;
                }
            }
            DatasetSource::Manifest { path, .. } => require_file(&format!("{field}.path"), path)?,
            DatasetSource::Pgm { paths } => {
                if paths.is_empty() {
                    return Err(CliError::Config(format!("{field}.paths is empty")));
                }
                for p in paths {
                    require_file(&format!("{field}.paths"), p)?;
                }
            }
            DatasetSource::Synthetic { count, .. } => {
                if *count == 0 {
                    return Err(CliError::Config(format!("{field}.count must be >= 1")));
                }
            }
        }
        Ok(())
    }

    pub fn load(&self, field: &str) -> Result<Dataset> {
        self.check(field)?;
        Ok(match self {
            DatasetSource::MnistIdx { images, labels, limit } => {
                let ds = load_mnist_idx(images, labels.as_deref())?;
                match limit {
                    Some(n) if *n < ds.len() => ds.subset(&(0..*n).collect::<Vec<_>>()),
                    _ => ds,
                }
            }
            DatasetSource::Manifest { path, with_clean } => {
                let m = Manifest::load(path)?;
                m.load_dataset(path.parent().unwrap_or(Path::new(".")), *with_clean)?
            }
            DatasetSource::Pgm { paths } => {
                let mut data = Vec::new();
                let mut shape = None;
                for p in paths {
                    let img = read_pgm(p)?;
                    let s = ImageShape::gray(img.shape()[1], img.shape()[2]);
                    if shape.is_some_and(|prev| prev != s) {
                        return Err(CliError::Data(format!("{}: size differs from the first image", p.display())));
                    }
                    shape = Some(s);
                    data.extend_from_slice(img.data());
                }
                Dataset::from_clean("pgm", shape.expect("non-empty"), data)?
            }
            DatasetSource::Synthetic {
                kind,
                count,
                height,
                width,
                seed,
            } => {
                let mut rng = NoiseRng::new(*seed, Stream::Synthetic);
                generate_synthetic(*count, (*height, *width), *kind, &mut rng)?
            }
        })
    }
}

/// Reads the JSON config (if any), applies the flag overrides key by key and
/// deserializes strictly. Returns the typed config, the verbatim file text
/// and the merged document.
fn load_config<T: DeserializeOwned>(
    path: Option<&Path>,
    overrides: Vec<(&str, Option<Value>)>,
) -> Result<(T, Option<String>, Value)> {
    let (raw, mut doc) = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("--config {}: {e}", p.display())))?;
            let doc: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            (Some(text), doc)
        }
        None => (None, json!({})),
    };
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
    for (key, value) in overrides {
        if let Some(v) = value {
            obj.insert(key.to_string(), v);
        }
    }
    let typed = serde_json::from_value(doc.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((typed, raw, doc))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Creates the output directory and records the config there.
fn prepare_output(dir: &Path, raw: Option<&str>, resolved: &Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    if let Some(text) = raw {
        let p = dir.join("config.json");
        fs::write(&p, text).map_err(io_err(&p))?;
    }
    write_json(&dir.join("resolved_config.json"), resolved)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn opt<T: Serialize>(v: &Option<T>) -> Option<Value> {
    v.as_ref().map(|x| serde_json::to_value(x).expect("serializable"))
}

fn path_value(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| Value::String(p.display().to_string()))
}

fn noise_override(sigma: Option<f64>, zeta: Option<f64>) -> Result<Option<Value>> {
    match (sigma, zeta) {
        (Some(_), Some(_)) => Err(CliError::Config("--sigma and --zeta are mutually exclusive".into())),
        (Some(s), None) => Ok(Some(json!({"kind": "gaussian", "sigma": s}))),
        (None, Some(z)) => Ok(Some(json!({"kind": "poisson", "zeta": z}))),
        (None, None) => Ok(None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchFlag {
    Sda,
    DncnnLite,
}

impl ArchFlag {
    fn value(self) -> Value {
        match self {
            ArchFlag::Sda => json!({"kind": "sda", "in_channels": 1}),
            ArchFlag::DncnnLite => json!({"kind": "dncnn_lite", "in_channels": 1, "depth": 7, "channels": 32}),
        }
    }
}

// ---------------------------------------------------------------- corrupt

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gaussian σ in [0, 1] intensity units (replaces `noise`).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Poisson gain (replaces `noise`).
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub write_clean: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptConfig {
    pub dataset: DatasetSource,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Also write the clean images and list them in the manifest.
    #[serde(default = "default_true")]
    pub write_clean: bool,
}

pub fn cmd_corrupt(args: CorruptArgs) -> Result<()> {
    let (cfg, raw, doc): (CorruptConfig, _, _) = load_config(
        args.config.as_deref(),
        vec![
            ("output_dir", path_value(&args.output_dir)),
            ("seed", opt(&args.seed)),
            ("noise", noise_override(args.sigma, args.zeta)?),
            ("write_clean", opt(&args.write_clean)),
        ],
    )?;
    cfg.noise.validate().map_err(|e| CliError::Config(format!("noise: {e}")))?;
    let ds = cfg.dataset.load("dataset")?;
    prepare_output(&cfg.output_dir, raw.as_deref(), &doc)?;
    let noisy = ds.corrupt(&cfg.noise, cfg.seed, 0)?;
    for sub in ["noisy", "clean"] {
        let p = cfg.output_dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut entries = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let name = format!("{i:05}.pgm");
        let noisy_rel = format!("noisy/{name}");
        write_pgm(&cfg.output_dir.join(&noisy_rel), &noisy.noisy_image(i)?)?;
        let clean = if cfg.write_clean {
            let rel = format!("clean/{name}");
            write_pgm(&cfg.output_dir.join(&rel), &ds.clean_image(i)?)?;
            Some(rel)
        } else {
            None
        };
        entries.push(ManifestEntry {
            noisy: noisy_rel,
            clean,
            sigma: noisy.sigma().map(|s| s[i]),
            zeta: match cfg.noise {
                NoiseSpec::Poisson { zeta } => Some(zeta),
                _ => None,
            },
        });
    }
    let manifest = Manifest {
        seed: cfg.seed,
        noise: cfg.noise,
        source: ds.name.clone(),
        entries,
    };
    manifest.save(&cfg.output_dir.join("manifest.json"))?;
    println!("wrote {} noisy images to {}", ds.len(), cfg.output_dir.display());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<ArchFlag>,
    #[arg(long)]
    pub objective: Option<ObjectiveArg>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub validation_split: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ObjectiveArg {
    MseGt,
    MseReg,
    Sure,
    BlindSure,
    SureFt,
    Pure,
}

impl ObjectiveArg {
    fn kind(self) -> ObjectiveKind {
        match self {
            ObjectiveArg::MseGt => ObjectiveKind::MseGt,
            ObjectiveArg::MseReg => ObjectiveKind::MseReg,
            ObjectiveArg::Sure => ObjectiveKind::Sure,
            ObjectiveArg::BlindSure => ObjectiveKind::BlindSure,
            ObjectiveArg::SureFt => ObjectiveKind::SureFt,
            ObjectiveArg::Pure => ObjectiveKind::Pure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub height: usize,
    pub width: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub validation: Option<DatasetSource>,
    /// Hold out this many images of `dataset` (seeded split) for validation.
    #[serde(default)]
    pub validation_split: Option<usize>,
    pub architecture: Architecture,
    pub objective: ObjectiveKind,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_decay_epoch: Option<usize>,
    #[serde(default)]
    pub lr_decayed: Option<f64>,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub probe: ProbePolicy,
    #[serde(default)]
    pub noise_refresh: Option<NoiseRefresh>,
    #[serde(default)]
    pub early_stopping: Option<usize>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Train on random crops instead of whole images.
    #[serde(default)]
    pub patches: Option<PatchConfig>,
    #[serde(default)]
    pub resume: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl TrainRunConfig {
    pub fn train_config(&self) -> TrainConfig {
        let objective = RiskObjective {
            kind: self.objective,
            epsilon: self.epsilon,
        };
        TrainConfig {
            objective,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: LrSchedule {
                initial: self.lr,
                decay_epoch: self.lr_decay_epoch,
                decayed: self.lr_decayed,
            },
            optimizer: self.optimizer,
            seed: self.seed,
            weight_decay: self.weight_decay,
            checkpoint_every: self.checkpoint_every,
            probe: self.probe,
            noise_refresh: self.noise_refresh,
            early_stopping: self.early_stopping,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub architecture: Architecture,
    pub objective: ObjectiveKind,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub final_loss: Option<f64>,
    pub final_val_psnr: Option<f64>,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let (cfg, raw, doc): (TrainRunConfig, _, _) = load_config(
        args.config.as_deref(),
        vec![
            ("output_dir", path_value(&args.output_dir)),
            ("architecture", args.arch.map(ArchFlag::value)),
            ("objective", args.objective.map(|o| json!(o.kind()))),
            ("epsilon", opt(&args.epsilon)),
            ("noise", noise_override(args.sigma, args.zeta)?),
            ("epochs", opt(&args.epochs)),
            ("batch_size", opt(&args.batch_size)),
            ("lr", opt(&args.lr)),
            ("weight_decay", opt(&args.weight_decay)),
            ("seed", opt(&args.seed)),
            ("validation_split", opt(&args.validation_split)),
            ("checkpoint_every", opt(&args.checkpoint_every)),
            ("resume", path_value(&args.resume)),
        ],
    )?;
    if let Some(n) = &cfg.noise {
        n.validate().map_err(|e| CliError::Config(format!("noise: {e}")))?;
    }
    let tc = cfg.train_config();
    tc.validate()?;
    cfg.dataset.check("dataset")?;
    if let Some(v) = &cfg.validation {
        v.check("validation")?;
    }
    if let Some(r) = &cfg.resume {
        require_file("resume", r)?;
    }

    let mut train_ds = cfg.dataset.load("dataset")?;
    if tc.objective.kind.needs_ground_truth() && !train_ds.has_clean() {
        return Err(CliError::Config(format!(
            "objective {} needs clean images but dataset '{}' has none",
            tc.objective.kind, train_ds.name
        )));
    }
    let validation = match (&cfg.validation, cfg.validation_split) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config("set either validation or validation_split, not both".into()))
        }
        (Some(src), None) => Some(src.load("validation")?),
        (None, Some(n)) => {
            if n == 0 || n >= train_ds.len() {
                return Err(CliError::Config(format!(
                    "validation_split {n} must be between 1 and {}",
                    train_ds.len() - 1
                )));
            }
            let (tr, val) = train_ds.split(train_ds.len() - n, cfg.seed)?;
            train_ds = tr;
            Some(val)
        }
        (None, None) => None,
    };
    let validation = match (validation, cfg.noise) {
        (Some(v), Some(noise)) if !v.has_noisy() => Some(v.corrupt(&noise, cfg.seed, VALIDATION_ROUND)?),
        (v, _) => v,
    };
    if let Some(p) = cfg.patches {
        let mut rng = NoiseRng::new(cfg.seed, Stream::Patches);
        train_ds = extract_patches(&train_ds, (p.height, p.width), p.count, &mut rng)?;
    }

    prepare_output(&cfg.output_dir, raw.as_deref(), &doc)?;
    let data = TrainData {
        train: &train_ds,
        noise: cfg.noise,
        validation: validation.as_ref(),
        checkpoint_dir: Some(&cfg.output_dir),
    };
    let result = match &cfg.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.architecture != cfg.architecture {
                return Err(CliError::Config(format!(
                    "resume: checkpoint holds {:?}, config asks for {:?}",
                    ckpt.architecture, cfg.architecture
                )));
            }
            resume(&ckpt, data, &tc).map(|(_, out)| out)
        }
        None => {
            let mut d = Denoiser::build(cfg.architecture, cfg.seed)?;
            train(&mut d, data, &tc)
        }
    };
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::NumericalAbort {
            epoch,
            batch,
            detail,
            last_good,
        }) => {
            let p = cfg.output_dir.join("last_good.ckpt");
            last_good.save(&p)?;
            return Err(CliError::Numerical(format!(
                "epoch {epoch}, batch {batch}: {detail}; last good parameters in {}",
                p.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt_path = cfg.output_dir.join("model.ckpt");
    outcome.checkpoint.save(&ckpt_path)?;
    write_csv(&cfg.output_dir.join("log.csv"), &outcome.history)?;
    let summary = TrainSummary {
        architecture: cfg.architecture,
        objective: cfg.objective,
        epochs_run: outcome.history.len(),
        stopped_early: outcome.stopped_early,
        final_loss: outcome.history.last().map(|h| h.loss),
        final_val_psnr: outcome.final_val_psnr(),
        wall_time_s: started.elapsed().as_secs_f64(),
        warnings: outcome.warnings.clone(),
        checkpoint: ckpt_path,
    };
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    match summary.final_val_psnr {
        Some(p) => println!("trained {} epochs, validation PSNR {p:.3} dB", summary.epochs_run),
        None => println!("trained {} epochs", summary.epochs_run),
    }
    Ok(())
}

// ---------------------------------------------------------------- refine

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Noise σ in [0, 1] intensity units.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Clean reference for reporting PSNR.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Return the last snapshot instead of the lowest-SURE one.
    #[arg(long)]
    pub no_keep_best: bool,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineRunConfig {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub sigma: f64,
    #[serde(default = "default_refine_epochs")]
    pub epochs: usize,
    #[serde(default = "default_refine_lr")]
    pub lr: f64,
    #[serde(default = "default_refine_decay_epoch")]
    pub lr_decay_epoch: Option<usize>,
    #[serde(default = "default_refine_decayed")]
    pub lr_decayed: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub keep_best: bool,
    #[serde(default = "default_score_probes")]
    pub score_probes: usize,
    #[serde(default)]
    pub gt: Option<PathBuf>,
    pub output_dir: PathBuf,
}

fn default_refine_epochs() -> usize {
    75
}

fn default_refine_lr() -> f64 {
    1e-4
}

fn default_refine_decay_epoch() -> Option<usize> {
    Some(50)
}

fn default_refine_decayed() -> Option<f64> {
    Some(5e-5)
}

fn default_score_probes() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineSummary {
    pub sure_before: f64,
    pub sure_after: f64,
    pub best_epoch: usize,
    pub psnr_before: Option<f64>,
    pub psnr_after: Option<f64>,
    pub wall_time_s: f64,
}

fn as_batch(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    Ok(img.reshape(&[1, s[0], s[1], s[2]])?)
}

pub fn cmd_refine(args: RefineArgs) -> Result<()> {
    let started = Instant::now();
    let (cfg, raw, doc): (RefineRunConfig, _, _) = load_config(
        args.config.as_deref(),
        vec![
            ("checkpoint", path_value(&args.checkpoint)),
            ("image", path_value(&args.image)),
            ("sigma", opt(&args.sigma)),
            ("epochs", opt(&args.epochs)),
            ("lr", opt(&args.lr)),
            ("epsilon", opt(&args.epsilon)),
            ("seed", opt(&args.seed)),
            ("gt", path_value(&args.gt)),
            ("keep_best", args.no_keep_best.then_some(Value::Bool(false))),
            ("output_dir", path_value(&args.output_dir)),
        ],
    )?;
    require_file("checkpoint", &cfg.checkpoint)?;
    require_file("image", &cfg.image)?;
    if let Some(gt) = &cfg.gt {
        require_file("gt", gt)?;
    }
    let ckpt = Checkpoint::load(&cfg.checkpoint)?;
    let y = read_pgm(&cfg.image)?;
    let gt = cfg.gt.as_deref().map(read_pgm).transpose()?;
    if gt.as_ref().is_some_and(|g| g.shape() != y.shape()) {
        return Err(CliError::Data("gt and image sizes differ".into()));
    }
    let rc = RefineConfig {
        epochs: cfg.epochs,
        lr: LrSchedule {
            initial: cfg.lr,
            decay_epoch: cfg.lr_decay_epoch,
            decayed: cfg.lr_decayed,
        },
        sigma: cfg.sigma,
        epsilon: cfg.epsilon,
        seed: cfg.seed,
        keep_best: cfg.keep_best,
        score_probes: cfg.score_probes,
        weight_decay: 0.0,
    };
    prepare_output(&cfg.output_dir, raw.as_deref(), &doc)?;
    let psnr_before = match &gt {
        Some(g) => {
            let mut d = ckpt.to_denoiser()?;
            let out = d.predict(&as_batch(&y)?)?;
            Some(psnr(&out.reshape(g.shape())?, g, 1.0)?)
        }
        None => None,
    };
    let outcome = match refine(&ckpt, &y, &rc) {
        Ok(o) => o,
        Err(TrainError::NumericalAbort { last_good, detail, .. }) => {
            let p = cfg.output_dir.join("last_good.ckpt");
            last_good.save(&p)?;
            return Err(CliError::Numerical(detail));
        }
        Err(e) => return Err(e.into()),
    };
    let denoised = outcome.denoised.reshape(y.shape())?;
    write_pgm(&cfg.output_dir.join("denoised.pgm"), &denoised)?;
    outcome.checkpoint.save(&cfg.output_dir.join("refined.ckpt"))?;
    write_csv(&cfg.output_dir.join("log.csv"), &outcome.history)?;
    let psnr_after = gt.as_ref().map(|g| psnr(&denoised, g, 1.0)).transpose()?;
    let summary = RefineSummary {
        sure_before: outcome.sure_before,
        sure_after: outcome.sure_after,
        best_epoch: outcome.best_epoch,
        psnr_before,
        psnr_after,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    println!("SURE before {:.6}", summary.sure_before);
    println!("SURE after  {:.6} (epoch {})", summary.sure_after, summary.best_epoch);
    if let (Some(a), Some(b)) = (psnr_before, psnr_after) {
        println!("PSNR {a:.3} dB -> {b:.3} dB");
    }
    Ok(())
}

// ---------------------------------------------------------------- denoise

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Noisy PGM image (repeatable).
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    /// Clean reference per input, in the same order (repeatable).
    #[arg(long)]
    pub gt: Vec<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseRunConfig {
    pub checkpoint: PathBuf,
    pub inputs: Vec<PathBuf>,
    #[serde(default)]
    pub gt: Vec<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoisedImage {
    pub input: PathBuf,
    pub output: PathBuf,
    pub psnr: Option<f64>,
}

pub fn cmd_denoise(args: DenoiseArgs) -> Result<()> {
    let list = |v: &[PathBuf]| (!v.is_empty()).then(|| json!(v));
    let (cfg, raw, doc): (DenoiseRunConfig, _, _) = load_config(
        args.config.as_deref(),
        vec![
            ("checkpoint", path_value(&args.checkpoint)),
            ("inputs", list(&args.inputs)),
            ("gt", list(&args.gt)),
            ("output_dir", path_value(&args.output_dir)),
        ],
    )?;
    require_file("checkpoint", &cfg.checkpoint)?;
    if cfg.inputs.is_empty() {
        return Err(CliError::Config("inputs is empty".into()));
    }
    for p in &cfg.inputs {
        require_file("inputs", p)?;
    }
    if !cfg.gt.is_empty() && cfg.gt.len() != cfg.inputs.len() {
        return Err(CliError::Config(format!(
            "gt lists {} images for {} inputs",
            cfg.gt.len(),
            cfg.inputs.len()
        )));
    }
    let mut d = Checkpoint::load(&cfg.checkpoint)?.to_denoiser()?;
    prepare_output(&cfg.output_dir, raw.as_deref(), &doc)?;
    let mut results = Vec::new();
    for (i, input) in cfg.inputs.iter().enumerate() {
        let y = read_pgm(input)?;
        let out = d.predict(&as_batch(&y)?)?.reshape(y.shape())?;
        let stem = input.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        let output = cfg.output_dir.join(format!("{stem}_denoised.pgm"));
        write_pgm(&output, &out)?;
        let psnr = match cfg.gt.get(i) {
            Some(g) => {
                let g = read_pgm(g)?;
                Some(psnr(&out, &g, 1.0)?)
            }
            None => None,
        };
        match psnr {
            Some(p) => println!("{} -> {} PSNR {p:.4} dB", input.display(), output.display()),
            None => println!("{} -> {}", input.display(), output.display()),
        }
        results.push(DenoisedImage {
            input: input.clone(),
            output,
            psnr,
        });
    }
    write_json(&cfg.output_dir.join("summary.json"), &results)
}

// ---------------------------------------------------------------- validate

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Divergence,
    Unbiasedness,
    Pure,
    Epsilon,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Suites to run.
    #[arg(value_enum, required = true)]
    pub suites: Vec<Suite>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<ArchFlag>,
    /// Validate a trained network instead of a fresh one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub realizations: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    #[serde(default = "default_arch")]
    pub architecture: Architecture,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Probe draws for the network divergence check.
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_linear_draws")]
    pub linear_draws: usize,
    #[serde(default = "default_linear_size")]
    pub linear_size: usize,
    #[serde(default = "default_realizations")]
    pub realizations: usize,
    /// Gaussian σ in [0, 1] units.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    /// Overrides the architecture's ε rule (Gaussian) or the PURE default.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_stderr_multiple")]
    pub stderr_multiple: f64,
    /// Clean images for the checks; synthetic strokes when absent.
    #[serde(default)]
    pub images: Option<DatasetSource>,
    /// Images per realization in the unbiasedness checks.
    #[serde(default = "default_image_count")]
    pub image_count: usize,
    #[serde(default = "default_eps_grid")]
    pub eps_grid: Vec<f64>,
    /// Largest accepted final-PSNR spread across the ε grid, in dB.
    #[serde(default = "default_max_spread")]
    pub max_spread: f64,
    #[serde(default = "default_sweep_epochs")]
    pub sweep_epochs: usize,
    #[serde(default = "default_sweep_train")]
    pub sweep_train: usize,
    #[serde(default = "default_sweep_val")]
    pub sweep_val: usize,
    #[serde(default = "default_sweep_batch")]
    pub sweep_batch_size: usize,
    #[serde(default = "default_sweep_lr")]
    pub sweep_lr: f64,
    #[serde(default = "default_validate_dir")]
    pub output_dir: PathBuf,
}

fn default_arch() -> Architecture {
    Architecture::Sda { in_channels: 1 }
}
fn default_draws() -> usize {
    100
}
fn default_linear_draws() -> usize {
    10_000
}
fn default_linear_size() -> usize {
    16
}
fn default_realizations() -> usize {
    2000
}
fn default_sigma() -> f64 {
    25.0 / 255.0
}
fn default_zeta() -> f64 {
    0.01
}
fn default_fd_step() -> f64 {
    FD_STEP
}
fn default_stderr_multiple() -> f64 {
    STDERR_MULTIPLE
}
fn default_image_count() -> usize {
    1
}
fn default_eps_grid() -> Vec<f64> {
    vec![1e-2, 1e-4, 1e-7]
}
fn default_max_spread() -> f64 {
    0.2
}
fn default_sweep_epochs() -> usize {
    3
}
fn default_sweep_train() -> usize {
    400
}
fn default_sweep_val() -> usize {
    40
}
fn default_sweep_batch() -> usize {
    20
}
fn default_sweep_lr() -> f64 {
    1e-3
}
fn default_validate_dir() -> PathBuf {
    PathBuf::from("validation")
}

fn random_matrix(k: usize, rng: &mut NoiseRng) -> Result<Tensor> {
    let data = (0..k * k).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Ok(Tensor::new(data, &[k, k])?)
}

/// Runs the selected suites and returns every report produced.
pub fn run_suites(cfg: &ValidateConfig, suites: &[Suite], threads: usize) -> Result<Vec<OracleReport>> {
    let network = match &cfg.checkpoint {
        Some(p) => {
            require_file("checkpoint", p)?;
            let ckpt = Checkpoint::load(p)?;
            if ckpt.architecture != cfg.architecture {
                log::info!("using the checkpoint's architecture {:?}", ckpt.architecture);
            }
            ckpt.to_denoiser()?
        }
        None => Denoiser::build(cfg.architecture, cfg.seed)?,
    };
    let arch = *network.architecture();
    let needed = cfg.image_count.max(if suites.contains(&Suite::Epsilon) {
        cfg.sweep_train + cfg.sweep_val
    } else {
        1
    });
    let images = match &cfg.images {
        Some(src) => src.load("images")?,
        None => {
            let mut rng = NoiseRng::new(cfg.seed, Stream::Synthetic);
            generate_synthetic(needed, (28, 28), SyntheticKind::Strokes, &mut rng)?
        }
    };
    if images.len() < cfg.image_count {
        return Err(CliError::Config(format!(
            "image_count {} exceeds the {} images available",
            cfg.image_count,
            images.len()
        )));
    }
    let shape = images.shape();
    let clean_batch = |n: usize| -> Result<Tensor> {
        let data = images.clean()?[..n * shape.numel()].to_vec();
        Ok(Tensor::new(data, &[n, shape.channels, shape.height, shape.width])?)
    };
    let gaussian_eps = cfg
        .epsilon
        .unwrap_or_else(|| epsilon_rule(arch.tag(), cfg.sigma * 255.0));
    let stat = Tolerance::StdErrors(cfg.stderr_multiple);
    let mut reports = Vec::new();
    for suite in suites {
        match suite {
            Suite::Divergence => {
                let mut rng = NoiseRng::new(cfg.seed, Stream::Evaluation);
                let k = cfg.linear_size;
                let lin = LinearDenoiser::new(random_matrix(k, &mut rng)?);
                let y = Tensor::new((0..k).map(|_| rng.normal()).collect(), &[1, k])?;
                let mut check = DivergenceCheck::new(1e-2, cfg.linear_draws, stat, cfg.seed);
                check.threads = threads;
                let r = validate_divergence(&lin, &y, &check)?;
                let mut vs_trace = OracleReport::new("divergence_linear_trace", r.estimate, lin.trace(), r.samples, r.stderr, stat);
                vs_trace.notes.push(format!("random {k}x{k} matrix, analytic trace"));
                reports.push(vs_trace);

                let mut check = DivergenceCheck::new(gaussian_eps, cfg.draws, stat, cfg.seed);
                check.fd_step = cfg.fd_step;
                check.threads = threads;
                let mut r = validate_divergence(&network, &clean_batch(1)?, &check)?;
                r.name = format!("divergence_{}", arch.tag().as_str());
                reports.push(r);
            }
            Suite::Unbiasedness => {
                let x = clean_batch(cfg.image_count)?;
                let mut check = RiskCheck::new(cfg.realizations, gaussian_eps, cfg.seed);
                check.stderr_multiple = cfg.stderr_multiple;
                check.threads = threads;
                let mut r = validate_unbiasedness(&IdentityDenoiser, &x, cfg.sigma, &check)?;
                r.name = "unbiasedness_identity".into();
                reports.push(r);
                let c = ConstantDenoiser {
                    value: Tensor::full(&x.shape()[1..], 0.5),
                };
                let mut r = validate_unbiasedness(&c, &x, cfg.sigma, &check)?;
                r.name = "unbiasedness_constant".into();
                reports.push(r);
                let mut r = validate_unbiasedness(&network, &x, cfg.sigma, &check)?;
                r.name = format!("unbiasedness_{}", arch.tag().as_str());
                reports.push(r);
            }
            Suite::Pure => {
                let x = clean_batch(cfg.image_count)?;
                let mut check = RiskCheck::new(cfg.realizations, cfg.epsilon.unwrap_or(PURE_EPSILON), cfg.seed);
                check.stderr_multiple = cfg.stderr_multiple;
                check.threads = threads;
                let c = ConstantDenoiser {
                    value: Tensor::full(&x.shape()[1..], 0.5),
                };
                let mut r = validate_pure(&c, &x, cfg.zeta, &check)?;
                r.name = "pure_constant".into();
                reports.push(r);
                let mut r = validate_pure(&network, &x, cfg.zeta, &check)?;
                r.name = format!("pure_{}", arch.tag().as_str());
                reports.push(r);
            }
            Suite::Epsilon => {
                if images.len() < cfg.sweep_train + cfg.sweep_val {
                    return Err(CliError::Config(format!(
                        "epsilon sweep needs {} images, {} available",
                        cfg.sweep_train + cfg.sweep_val,
                        images.len()
                    )));
                }
                let pool = images.subset(&(0..cfg.sweep_train + cfg.sweep_val).collect::<Vec<_>>());
                let (tr, val) = pool.split(cfg.sweep_train, cfg.seed)?;
                let noise = NoiseSpec::Gaussian { sigma: cfg.sigma };
                let tr = tr.corrupt(&noise, cfg.seed, 0)?;
                let val = val.corrupt(&noise, cfg.seed, VALIDATION_ROUND)?;
                let base = TrainConfig::new(
                    RiskObjective::new(ObjectiveKind::Sure),
                    cfg.sweep_epochs,
                    cfg.sweep_batch_size,
                    cfg.sweep_lr,
                    cfg.seed,
                );
                let table = epsilon_sweep(arch, TrainData::new(&tr), &val, &base, &cfg.eps_grid)?;
                println!("{table}");
                reports.push(table.report(cfg.max_spread));
            }
        }
    }
    Ok(reports)
}

pub fn cmd_validate(args: ValidateArgs, threads: usize) -> Result<()> {
    let (cfg, raw, doc): (ValidateConfig, _, _) = load_config(
        args.config.as_deref(),
        vec![
            ("architecture", args.arch.map(ArchFlag::value)),
            ("checkpoint", path_value(&args.checkpoint)),
            ("seed", opt(&args.seed)),
            ("draws", opt(&args.draws)),
            ("realizations", opt(&args.realizations)),
            ("sigma", opt(&args.sigma)),
            ("zeta", opt(&args.zeta)),
            ("epsilon", opt(&args.epsilon)),
            ("output_dir", path_value(&args.output_dir)),
        ],
    )?;
    if let Some(src) = &cfg.images {
        src.check("images")?;
    }
    prepare_output(&cfg.output_dir, raw.as_deref(), &doc)?;
    let reports = run_suites(&cfg, &args.suites, threads)?;
    for r in &reports {
        println!("{r}");
    }
    write_reports(
        &reports,
        &cfg.output_dir.join("report.json"),
        &cfg.output_dir.join("report.txt"),
    )?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(failed.join(", ")))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Corrupt(a) => cmd_corrupt(a),
        Command::Train(a) => cmd_train(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Denoise(a) => cmd_denoise(a),
        Command::Validate(a) => cmd_validate(a, threads),
    }
}
