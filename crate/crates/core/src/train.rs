//! Optimizers, the minibatch training loop and single-image refinement.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{mean_psnr, Batch, DataError, Dataset};
use crate::nn::{Denoiser, MaskPolicy, Mode, NnError, Param};
use crate::noise::{perturb_gaussian, NoiseRng, NoiseSpec, Stream};
use crate::risk::{
    draw_probe, evaluate, mse_loss, pure_zeta_warning, sure_ft_loss_with_probe, ObjectiveKind,
    RiskError, RiskInputs, RiskObjective,
};
use crate::tensor::{no_grad, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("objective {objective} needs clean images but dataset '{dataset}' has none")]
    MissingGroundTruth {
        objective: ObjectiveKind,
        dataset: String,
    },
    #[error("numerical abort at epoch {epoch}, batch {batch}: {detail}")]
    NumericalAbort {
        epoch: usize,
        batch: usize,
        detail: String,
        /// Parameters from just before the failing step.
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Risk(RiskError),
    #[error(transparent)]
    Denoiser(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("csv log: {0}")]
    Csv(#[from] csv::Error),
}

impl From<RiskError> for TrainError {
    fn from(e: RiskError) -> Self {
        TrainError::Risk(e)
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Optimizer hyperparameters and per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    /// One update of `values` in place. Entries with `mask[i] == false` are
    /// skipped entirely, moment buffers included.
    pub fn adam_step(&mut self, values: &mut [Vec<f64>], grads: &[Vec<f64>], mask: &[bool]) {
        assert_eq!(values.len(), grads.len());
        assert_eq!(values.len(), mask.len());
        if self.kind == OptimizerKind::Adam && self.first_moment.is_empty() {
            self.first_moment = values.iter().map(|v| vec![0.0; v.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (v, g)) in values.iter_mut().zip(grads).enumerate() {
            if !mask[i] {
                continue;
            }
            assert_eq!(v.len(), g.len(), "gradient shape for parameter {i}");
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gw) in v.iter_mut().zip(g) {
                        *w -= self.lr * (gw + self.weight_decay * *w);
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.first_moment[i];
                    let s = &mut self.second_moment[i];
                    for k in 0..v.len() {
                        let gk = g[k] + self.weight_decay * v[k];
                        m[k] = b1 * m[k] + (1.0 - b1) * gk;
                        s[k] = b2 * s[k] + (1.0 - b2) * gk * gk;
                        let m_hat = m[k] / c1;
                        let s_hat = s[k] / c2;
                        v[k] -= self.lr * m_hat / (s_hat.sqrt() + self.eps);
                    }
                }
            }
        }
    }

    /// Applies the accumulated gradients of `params` and clears them.
    pub fn apply(&mut self, params: &mut [&mut Param]) {
        let mask: Vec<bool> = params.iter().map(|p| p.trainable).collect();
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.value.grad().unwrap_or_else(|| vec![0.0; p.value.numel()]))
            .collect();
        let mut values: Vec<Vec<f64>> = params.iter().map(|p| p.value.to_vec()).collect();
        self.adam_step(&mut values, &grads, &mask);
        for ((p, v), &m) in params.iter_mut().zip(values).zip(&mask) {
            if m {
                p.set_data(v);
            } else {
                p.value.zero_grad();
            }
        }
    }
}

/// Piecewise-constant learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub decay_epoch: Option<usize>,
    #[serde(default)]
    pub decayed: Option<f64>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            decay_epoch: None,
            decayed: None,
        }
    }

    pub fn step(initial: f64, decay_epoch: usize, decayed: f64) -> Self {
        Self {
            initial,
            decay_epoch: Some(decay_epoch),
            decayed: Some(decayed),
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        match (self.decay_epoch, self.decayed) {
            (Some(e), Some(lr)) if epoch >= e => lr,
            _ => self.initial,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.initial) || self.decayed.is_some_and(|v| !ok(v)) {
            return Err(TrainError::Config(format!("learning rates must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// How Monte-Carlo probes are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePolicy {
    /// One probe per sample per epoch, keyed by (epoch, sample index).
    #[default]
    PerSampleEpoch,
    /// A fresh probe for every batch.
    PerBatch,
}

/// Whether noisy training images stay fixed or are redrawn every epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRefresh {
    Fixed,
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: RiskObjective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Save a checkpoint every this many epochs (needs a checkpoint directory).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub probe: ProbePolicy,
    /// Defaults to per-epoch for `mse_gt` and fixed otherwise.
    #[serde(default)]
    pub noise_refresh: Option<NoiseRefresh>,
    /// Stop after this many consecutive increases of the validation loss.
    /// Defaults to 3 for `mse_reg`, off otherwise.
    #[serde(default)]
    pub early_stopping: Option<usize>,
}

impl TrainConfig {
    pub fn new(objective: RiskObjective, epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        Self {
            objective,
            epochs,
            batch_size,
            lr: LrSchedule::constant(lr),
            optimizer: OptimizerKind::Adam,
            seed,
            weight_decay: 0.0,
            checkpoint_every: None,
            probe: ProbePolicy::PerSampleEpoch,
            noise_refresh: None,
            early_stopping: None,
        }
    }

    pub fn noise_refresh(&self) -> NoiseRefresh {
        self.noise_refresh.unwrap_or(match self.objective.kind {
            ObjectiveKind::MseGt => NoiseRefresh::PerEpoch,
            _ => NoiseRefresh::Fixed,
        })
    }

    pub fn early_stopping(&self) -> Option<usize> {
        self.early_stopping
            .or((self.objective.kind == ObjectiveKind::MseReg).then_some(3))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("weight_decay must be >= 0".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(TrainError::Config("checkpoint_every must be >= 1".into()));
        }
        self.lr.validate()?;
        self.objective.validate()?;
        Ok(())
    }
}

/// Training images plus what is needed to (re)generate their noise.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    /// Required for per-epoch noise, for PURE (ζ) and when the dataset
    /// carries no noisy images or σ.
    pub noise: Option<NoiseSpec>,
    /// Noisy validation images; clean ones enable the PSNR diagnostic.
    pub validation: Option<&'a Dataset>,
    pub checkpoint_dir: Option<&'a Path>,
}

impl<'a> TrainData<'a> {
    pub fn new(train: &'a Dataset) -> Self {
        Self {
            train,
            noise: None,
            validation: None,
            checkpoint_dir: None,
        }
    }
}

/// One row of the per-epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub objective: ObjectiveKind,
    pub loss: f64,
    pub mse_vs_gt: Option<f64>,
    pub divergence_estimate: f64,
    pub data_fidelity: f64,
    pub val_psnr: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

pub fn write_csv(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "epoch",
            "objective",
            "loss",
            "mse_vs_gt",
            "divergence_estimate",
            "data_fidelity",
            "val_psnr",
            "lr",
            "wall_ms",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
    pub checkpoints_written: Vec<PathBuf>,
}

impl TrainOutcome {
    pub fn final_val_psnr(&self) -> Option<f64> {
        self.history.last().and_then(|h| h.val_psnr)
    }
}

/// Eval-mode outputs in chunks, without building a graph.
pub fn predict_dataset(d: &mut Denoiser, ds: &Dataset, chunk: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(ds.len() * ds.shape().numel());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let b = ds.batch(part, 0, 0)?;
        out.extend_from_slice(d.predict(&b.y)?.data());
    }
    let mut shape = vec![ds.len()];
    shape.extend(ds.shape().dims());
    Ok(Tensor::new(out, &shape)?)
}

/// Mean per-image PSNR (peak 1) of the network on a noisy dataset with clean
/// references.
pub fn evaluate_psnr(d: &mut Denoiser, ds: &Dataset) -> Result<f64> {
    let pred = predict_dataset(d, ds, 100)?;
    let mut shape = vec![ds.len()];
    shape.extend(ds.shape().dims());
    let clean = Tensor::new(ds.clean()?.to_vec(), &shape)?;
    Ok(mean_psnr(&pred, &clean, 1.0)?)
}

fn validation_reg_loss(d: &mut Denoiser, ds: &Dataset) -> Result<f64> {
    let pred = predict_dataset(d, ds, 100)?;
    let y = Tensor::new(ds.noisy()?.to_vec(), pred.shape())?;
    Ok(mse_loss(&pred, &y)?.item()?)
}

fn batch_probe(
    cfg: &TrainConfig,
    batch: &Batch,
    n_samples: usize,
    global_batch: u64,
) -> Result<Tensor> {
    let shape = batch.y.shape();
    let kind = cfg.objective.kind;
    match cfg.probe {
        ProbePolicy::PerBatch => {
            let mut rng = NoiseRng::substream(cfg.seed, Stream::Probe, global_batch);
            Ok(draw_probe(kind, shape, &mut rng))
        }
        ProbePolicy::PerSampleEpoch => {
            let per_shape = &shape[1..];
            let mut data = Vec::with_capacity(batch.y.numel());
            for &i in &batch.indices {
                let key = (batch.epoch * n_samples + i) as u64;
                let mut rng = NoiseRng::substream(cfg.seed, Stream::Probe, key);
                data.extend_from_slice(draw_probe(kind, per_shape, &mut rng).data());
            }
            Ok(Tensor::new(data, shape)?)
        }
    }
}

fn snapshot(d: &Denoiser) -> Vec<Vec<f64>> {
    d.params().iter().map(|p| p.value.to_vec()).collect()
}

fn restore(d: &mut Denoiser, values: &[Vec<f64>]) {
    for (p, v) in d.params_mut().into_iter().zip(values) {
        p.set_data(v.clone());
    }
}

fn is_numerical(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Risk(RiskError::NonFinite { .. })
            | TrainError::Risk(RiskError::Tensor(TensorError::NonFinite { .. }))
            | TrainError::Tensor(TensorError::NonFinite { .. })
    )
}

/// Per-sample σ of a batch, falling back to the configured noise level.
fn batch_sigma(batch: &Batch, noise: Option<&NoiseSpec>) -> Vec<f64> {
    if !batch.sigma.is_empty() {
        return batch.sigma.clone();
    }
    match noise {
        Some(NoiseSpec::Gaussian { sigma }) => vec![*sigma; batch.len()],
        _ => Vec::new(),
    }
}

/// Minimizes the configured objective over `data.train`.
pub fn train(d: &mut Denoiser, data: TrainData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr.initial);
    opt.weight_decay = cfg.weight_decay;
    run_training(d, data, cfg, opt, 0)
}

/// Continues from a checkpoint's parameters, optimizer state and epoch.
pub fn resume(ckpt: &Checkpoint, data: TrainData<'_>, cfg: &TrainConfig) -> Result<(Denoiser, TrainOutcome)> {
    let mut d = ckpt.to_denoiser()?;
    let opt = ckpt.optimizer.clone().unwrap_or_else(|| {
        let mut o = OptimizerState::new(cfg.optimizer, cfg.lr.initial);
        o.weight_decay = cfg.weight_decay;
        o
    });
    let outcome = run_training(&mut d, data, cfg, opt, ckpt.epoch)?;
    Ok((d, outcome))
}

fn run_training(
    d: &mut Denoiser,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    mut opt: OptimizerState,
    start_epoch: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let kind = cfg.objective.kind;
    let ds = data.train;
    if kind.needs_ground_truth() && !ds.has_clean() {
        return Err(TrainError::MissingGroundTruth {
            objective: kind,
            dataset: ds.name.clone(),
        });
    }
    if cfg.batch_size > ds.len() {
        return Err(TrainError::Config(format!(
            "batch_size {} exceeds dataset size {}",
            cfg.batch_size,
            ds.len()
        )));
    }
    let refresh = match (cfg.noise_refresh, data.noise) {
        (None, None) => NoiseRefresh::Fixed,
        _ => cfg.noise_refresh(),
    };
    if refresh == NoiseRefresh::PerEpoch && (data.noise.is_none() || !ds.has_clean()) {
        return Err(TrainError::Config(
            "per-epoch noise needs clean images and a noise spec".into(),
        ));
    }
    let zeta = match data.noise {
        Some(NoiseSpec::Poisson { zeta }) => Some(zeta),
        _ => None,
    };
    let mut warnings = Vec::new();
    if kind == ObjectiveKind::Pure {
        let z = zeta.ok_or_else(|| TrainError::Config("pure needs a poisson noise spec".into()))?;
        if let Some(w) = pure_zeta_warning(z) {
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    let fixed_noisy;
    let mut current: &Dataset = if ds.has_noisy() {
        ds
    } else if refresh == NoiseRefresh::Fixed {
        let noise = data
            .noise
            .ok_or_else(|| TrainError::Config("dataset has no noisy images and no noise spec".into()))?;
        fixed_noisy = ds.corrupt(&noise, cfg.seed, 0)?;
        &fixed_noisy
    } else {
        ds
    };
    let needs_sigma = matches!(
        kind,
        ObjectiveKind::Sure | ObjectiveKind::BlindSure | ObjectiveKind::SureFt
    );
    if needs_sigma
        && current.sigma().is_none()
        && !matches!(data.noise, Some(NoiseSpec::Gaussian { .. }))
    {
        return Err(TrainError::Config(format!("{kind} needs per-sample sigma or a gaussian noise spec")));
    }

    let arch = d.tag();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut checkpoints_written = Vec::new();
    let mut prev_val_loss = f64::INFINITY;
    let mut increases = 0;
    let mut global_batch = 0u64;
    let mut refreshed;
    for epoch in start_epoch..cfg.epochs {
        let started = Instant::now();
        if refresh == NoiseRefresh::PerEpoch {
            refreshed = ds.corrupt(data.noise.as_ref().expect("checked"), cfg.seed, epoch as u64)?;
            current = &refreshed;
        }
        let lr = cfg.lr.at(epoch);
        opt.lr = lr;
        let mut sums = [0.0f64; 3];
        let mut gt_sum = 0.0;
        let mut gt_seen = true;
        let mut count = 0usize;
        for batch in current.batches(cfg.batch_size, cfg.seed, epoch)? {
            let sigma = batch_sigma(&batch, data.noise.as_ref());
            let probe = if kind.uses_probe() {
                batch_probe(cfg, &batch, current.len(), global_batch)?
            } else {
                Tensor::zeros(batch.y.shape())
            };
            global_batch += 1;
            let before = snapshot(d);
            let step = (|| -> Result<crate::risk::LossReport> {
                let inputs = RiskInputs {
                    y: &batch.y,
                    clean: batch.x.as_ref(),
                    sigma: &sigma,
                    zeta,
                    arch,
                };
                let value = evaluate(&cfg.objective, d, inputs, &probe, Mode::Train)?;
                value.loss.backward()?;
                let mut params = d.params_mut();
                opt.apply(&mut params);
                Ok(value.report)
            })();
            let report = match step {
                Ok(r) => r,
                Err(e) if is_numerical(&e) => {
                    restore(d, &before);
                    d.zero_grad();
                    return Err(TrainError::NumericalAbort {
                        epoch,
                        batch: batch.index,
                        detail: e.to_string(),
                        last_good: Box::new(Checkpoint::from_denoiser(d, Some(&opt), cfg.seed, epoch)),
                    });
                }
                Err(e) => return Err(e),
            };
            let m = batch.len() as f64;
            sums[0] += report.loss * m;
            sums[1] += report.divergence_estimate * m;
            sums[2] += report.data_fidelity * m;
            match report.mse_vs_gt {
                Some(v) => gt_sum += v * m,
                None => gt_seen = false,
            }
            count += batch.len();
        }
        let n = count as f64;
        let mut val_psnr = None;
        if let Some(val) = data.validation {
            if val.has_clean() && val.has_noisy() {
                val_psnr = Some(evaluate_psnr(d, val)?);
            }
            if let (Some(patience), true) = (cfg.early_stopping(), val.has_noisy()) {
                let v = validation_reg_loss(d, val)?;
                increases = if v > prev_val_loss { increases + 1 } else { 0 };
                prev_val_loss = v;
                if increases >= patience {
                    stopped_early = true;
                }
            }
        }
        let row = EpochLog {
            epoch,
            objective: kind,
            loss: sums[0] / n,
            mse_vs_gt: gt_seen.then_some(gt_sum / n),
            divergence_estimate: sums[1] / n,
            data_fidelity: sums[2] / n,
            val_psnr,
            lr,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch} {kind} loss {:.6} val_psnr {:?} ({} ms)",
            row.loss,
            row.val_psnr,
            row.wall_ms
        );
        history.push(row);
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, data.checkpoint_dir) {
            if (epoch + 1) % every == 0 {
                let path = dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
                Checkpoint::from_denoiser(d, Some(&opt), cfg.seed, epoch + 1).save(&path)?;
                checkpoints_written.push(path);
            }
        }
        if stopped_early {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let last_epoch = history.last().map_or(start_epoch, |h| h.epoch + 1);
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_denoiser(d, Some(&opt), cfg.seed, last_epoch),
        history,
        stopped_early,
        warnings,
        checkpoints_written,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    #[serde(default = "RefineConfig::default_epochs")]
    pub epochs: usize,
    #[serde(default = "RefineConfig::default_lr")]
    pub lr: LrSchedule,
    /// σ in intensity units.
    pub sigma: f64,
    /// Overrides the architecture's probe-step rule.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Return the snapshot with the lowest SURE instead of the last one.
    #[serde(default = "RefineConfig::default_keep_best")]
    pub keep_best: bool,
    /// Probes averaged when scoring snapshots for `keep_best`.
    #[serde(default = "RefineConfig::default_score_probes")]
    pub score_probes: usize,
    #[serde(default)]
    pub weight_decay: f64,
}

impl RefineConfig {
    fn default_epochs() -> usize {
        75
    }

    fn default_lr() -> LrSchedule {
        LrSchedule::step(1e-4, 50, 5e-5)
    }

    fn default_keep_best() -> bool {
        true
    }

    fn default_score_probes() -> usize {
        8
    }

    pub fn new(sigma: f64, seed: u64) -> Self {
        Self {
            epochs: Self::default_epochs(),
            lr: Self::default_lr(),
            sigma,
            epsilon: None,
            seed,
            keep_best: true,
            score_probes: Self::default_score_probes(),
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub checkpoint: Checkpoint,
    /// Refined network output on the input image, `[1, C, H, W]`.
    pub denoised: Tensor,
    pub sure_before: f64,
    pub sure_after: f64,
    /// Epoch count of the returned snapshot (0 = the pretrained network).
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Mean single-image SURE over fixed evaluation probes (no graph).
pub fn score_sure(d: &mut Denoiser, y: &Tensor, sigma: f64, eps: f64, probes: &[Tensor]) -> Result<f64> {
    no_grad(|| {
        let mut total = 0.0;
        for p in probes {
            total += sure_ft_loss_with_probe(d, y, sigma, eps, p, Mode::Eval)?.report.loss;
        }
        Ok(total / probes.len() as f64)
    })
}

/// Fine-tunes a pretrained network on a single noisy image by minimizing its
/// SURE, with batch norm frozen.
pub fn refine(ckpt: &Checkpoint, y: &Tensor, cfg: &RefineConfig) -> Result<RefineOutcome> {
    cfg.lr.validate()?;
    if !(cfg.sigma > 0.0) {
        return Err(TrainError::Config(format!("sigma must be positive, got {}", cfg.sigma)));
    }
    if cfg.score_probes == 0 {
        return Err(TrainError::Config("score_probes must be >= 1".into()));
    }
    let y = match y.shape() {
        [c, h, w] => y.reshape(&[1, *c, *h, *w])?,
        [1, _, _, _] => y.clone(),
        other => {
            return Err(TrainError::Config(format!("refine takes one image, got shape {other:?}")));
        }
    };
    let mut d = ckpt.to_denoiser()?;
    d.apply_param_mask(MaskPolicy::FreezeBatchNorm);
    let eps = cfg
        .epsilon
        .unwrap_or_else(|| crate::risk::epsilon_rule(d.tag(), cfg.sigma * 255.0));
    let mut score_rng = NoiseRng::new(cfg.seed, Stream::Evaluation);
    let probes: Vec<Tensor> = (0..cfg.score_probes)
        .map(|_| perturb_gaussian(y.shape(), &mut score_rng))
        .collect();

    let sure_before = score_sure(&mut d, &y, cfg.sigma, eps, &probes)?;
    let mut best = (sure_before, 0usize, snapshot(&d));
    let mut opt = OptimizerState::adam(cfg.lr.initial);
    opt.weight_decay = cfg.weight_decay;
    let mut history = Vec::new();
    let mut last_score = sure_before;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        opt.lr = cfg.lr.at(epoch);
        let probe = perturb_gaussian(
            y.shape(),
            &mut NoiseRng::substream(cfg.seed, Stream::Probe, epoch as u64),
        );
        let before = snapshot(&d);
        let step = (|| -> Result<crate::risk::LossReport> {
            let v = sure_ft_loss_with_probe(&mut d, &y, cfg.sigma, eps, &probe, Mode::Train)?;
            v.loss.backward()?;
            let mut params = d.params_mut();
            opt.apply(&mut params);
            Ok(v.report)
        })();
        let report = match step {
            Ok(r) => r,
            Err(e) if is_numerical(&e) => {
                restore(&mut d, &before);
                return Err(TrainError::NumericalAbort {
                    epoch,
                    batch: 0,
                    detail: e.to_string(),
                    last_good: Box::new(Checkpoint::from_denoiser(&d, Some(&opt), cfg.seed, epoch)),
                });
            }
            Err(e) => return Err(e),
        };
        last_score = score_sure(&mut d, &y, cfg.sigma, eps, &probes)?;
        if last_score < best.0 {
            best = (last_score, epoch + 1, snapshot(&d));
        }
        history.push(EpochLog {
            epoch,
            objective: ObjectiveKind::SureFt,
            loss: report.loss,
            mse_vs_gt: None,
            divergence_estimate: report.divergence_estimate,
            data_fidelity: report.data_fidelity,
            val_psnr: None,
            lr: opt.lr,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    let (sure_after, best_epoch) = if cfg.keep_best {
        restore(&mut d, &best.2);
        (best.0, best.1)
    } else {
        (last_score, cfg.epochs)
    };
    let denoised = d.predict(&y)?;
    Ok(RefineOutcome {
        checkpoint: Checkpoint::from_denoiser(&d, Some(&opt), cfg.seed, best_epoch),
        denoised,
        sure_before,
        sure_after,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests;
