//! Training objectives: supervised MSE, its noisy-target variant, Monte-Carlo
//! SURE (fixed, per-sample and single-image) and PURE, plus a brute-force
//! finite-difference divergence used as an oracle.
//!
//! Noise levels passed to the loss functions are in image-intensity units
//! (images live in [0, 1]); [`epsilon_rule`] takes σ on the 0-255 scale.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ArchTag, Denoise, Mode, NnError};
use crate::noise::{perturb_binary, perturb_gaussian, NoiseRng};
use crate::tensor::{no_grad, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("{op}: shapes {lhs:?} and {rhs:?} differ")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0} needs ground-truth images but the batch has none")]
    MissingGroundTruth(&'static str),
    #[error("invalid {what}: {value}")]
    InvalidParameter { what: &'static str, value: f64 },
    #[error("unknown objective '{0}'")]
    UnknownObjective(String),
    #[error("expected {expected} per-sample noise levels, got {got}")]
    SigmaCount { expected: usize, got: usize },
    #[error("{objective} produced a non-finite value (epsilon = {epsilon:e}): {detail}")]
    NonFinite {
        objective: &'static str,
        epsilon: f64,
        detail: String,
    },
    #[error(transparent)]
    Denoiser(NnError),
    #[error(transparent)]
    Tensor(TensorError),
}

impl From<TensorError> for RiskError {
    fn from(e: TensorError) -> Self {
        RiskError::Tensor(e)
    }
}

impl From<NnError> for RiskError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Tensor(t) => RiskError::Tensor(t),
            other => RiskError::Denoiser(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, RiskError>;

/// Default PURE probe step.
pub const PURE_EPSILON: f64 = 1e-3;
/// Above this gain the PURE estimate is known to get too noisy to train on.
pub const PURE_ZETA_WARN: f64 = 0.2;
/// Lower bound for per-sample probe steps (σ = 0 would otherwise give ε = 0).
pub const EPSILON_FLOOR: f64 = 1e-7;
/// Default central-difference step of [`exact_divergence_fd`].
pub const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    MseGt,
    MseReg,
    Sure,
    BlindSure,
    SureFt,
    Pure,
}

impl ObjectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::MseGt => "mse_gt",
            ObjectiveKind::MseReg => "mse_reg",
            ObjectiveKind::Sure => "sure",
            ObjectiveKind::BlindSure => "blind_sure",
            ObjectiveKind::SureFt => "sure_ft",
            ObjectiveKind::Pure => "pure",
        }
    }

    pub fn needs_ground_truth(&self) -> bool {
        *self == ObjectiveKind::MseGt
    }

    /// Whether the objective carries a Monte-Carlo divergence term.
    pub fn uses_probe(&self) -> bool {
        !matches!(self, ObjectiveKind::MseGt | ObjectiveKind::MseReg)
    }

    pub fn is_poisson(&self) -> bool {
        *self == ObjectiveKind::Pure
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = RiskError;

    fn from_str(s: &str) -> Result<Self> {
        [
            ObjectiveKind::MseGt,
            ObjectiveKind::MseReg,
            ObjectiveKind::Sure,
            ObjectiveKind::BlindSure,
            ObjectiveKind::SureFt,
            ObjectiveKind::Pure,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| RiskError::UnknownObjective(s.to_string()))
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Probe-step rules from σ on the 0-255 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonRule {
    /// Constant 1e-4.
    Sda,
    /// σ · 1.4e-4.
    DncnnLite,
    /// σ⁽ʲ⁾ · 1.2e-4 per sample.
    Blind,
}

impl EpsilonRule {
    pub fn epsilon(&self, sigma_255: f64) -> f64 {
        match self {
            EpsilonRule::Sda => 1e-4,
            EpsilonRule::DncnnLite => (sigma_255 * 1.4e-4).max(EPSILON_FLOOR),
            EpsilonRule::Blind => (sigma_255 * 1.2e-4).max(EPSILON_FLOOR),
        }
    }
}

pub fn epsilon_rule(arch: ArchTag, sigma_255: f64) -> f64 {
    match arch {
        ArchTag::Sda => EpsilonRule::Sda.epsilon(sigma_255),
        ArchTag::DncnnLite => EpsilonRule::DncnnLite.epsilon(sigma_255),
    }
}

/// Objective plus an optional fixed probe step overriding the rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskObjective {
    pub kind: ObjectiveKind,
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl RiskObjective {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self { kind, epsilon: None }
    }

    pub fn with_epsilon(kind: ObjectiveKind, epsilon: f64) -> Self {
        Self {
            kind,
            epsilon: Some(epsilon),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(RiskError::InvalidParameter {
                    what: "epsilon",
                    value: e,
                });
            }
        }
        Ok(())
    }

    /// Probe step for one sample with noise level `sigma_255` (0-255 scale).
    pub fn epsilon_for(&self, arch: ArchTag, sigma_255: f64) -> f64 {
        if let Some(e) = self.epsilon {
            return e;
        }
        match self.kind {
            ObjectiveKind::Pure => PURE_EPSILON,
            ObjectiveKind::BlindSure => EpsilonRule::Blind.epsilon(sigma_255),
            _ => epsilon_rule(arch, sigma_255),
        }
    }
}

/// Per-batch loss broken into its parts. For the SURE family
/// `loss = data_fidelity - noise_correction + divergence_term`; all parts are
/// batch means.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub mse_vs_gt: Option<f64>,
    /// Mean Monte-Carlo divergence `ñᵗ(h(y+εñ)-h(y))/ε` (for PURE the
    /// `(ṅ⊙y)` weighted version).
    pub divergence_estimate: f64,
    pub data_fidelity: f64,
    pub noise_correction: f64,
    pub divergence_term: f64,
}

impl LossReport {
    pub fn reconstructed(&self) -> f64 {
        self.data_fidelity - self.noise_correction + self.divergence_term
    }
}

/// Differentiable loss and its report.
#[derive(Debug, Clone)]
pub struct RiskValue {
    pub loss: Tensor,
    pub report: LossReport,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(RiskError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn sample_axes(t: &Tensor) -> Vec<usize> {
    (1..t.rank()).collect()
}

fn per_sample_sq(diff: &Tensor) -> Result<Tensor> {
    if diff.rank() < 2 {
        return Ok(diff.square()?.reduce_sum(&[])?);
    }
    Ok(diff.square()?.reduce_sum(&sample_axes(diff))?)
}

/// `(1/M) Σⱼ ‖hⱼ - xⱼ‖²`.
pub fn mse_loss(h_out: &Tensor, x: &Tensor) -> Result<Tensor> {
    same_shape("mse_loss", h_out, x)?;
    let m = h_out.shape().first().copied().unwrap_or(1).max(1);
    Ok(h_out.sub(x)?.square()?.sum_all()?.scale(1.0 / m as f64)?)
}

/// [`mse_loss`] against the noisy input itself.
pub fn mse_reg_loss(h_out: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("mse_reg_loss", h_out, y)?;
    mse_loss(h_out, y)
}

fn batch_size(y: &Tensor) -> Result<usize> {
    match y.shape().first() {
        Some(&m) if y.rank() >= 2 && m >= 1 => Ok(m),
        _ => Err(RiskError::ShapeMismatch {
            op: "batch",
            lhs: y.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

fn per_sample_column(values: &[f64], rank: usize) -> Result<Tensor> {
    let mut shape = vec![1; rank];
    shape[0] = values.len();
    Ok(Tensor::new(values.to_vec(), &shape)?)
}

/// `y + ε_j · probe_j` as a constant tensor.
fn perturb(y: &Tensor, probe: &Tensor, eps: &[f64]) -> Result<Tensor> {
    let k = y.numel() / eps.len();
    let data: Vec<f64> = y
        .data()
        .iter()
        .zip(probe.data())
        .enumerate()
        .map(|(i, (&yv, &p))| yv + eps[i / k] * p)
        .collect();
    Ok(Tensor::new(data, y.shape())?)
}

/// Per-sample Monte-Carlo divergence `ñⱼᵗ(h(yⱼ+εñⱼ) - h(yⱼ))/ε`, kept on the
/// graph so it can be differentiated with respect to the parameters.
pub fn mc_divergence(
    d: &mut dyn Denoise,
    y: &Tensor,
    eps: f64,
    probe: &Tensor,
    mode: Mode,
) -> Result<Tensor> {
    check_eps(eps)?;
    same_shape("mc_divergence", y, probe)?;
    let m = batch_size(y)?;
    let h = d.denoise(y, mode)?;
    let inner = probe_inner(d, y, &h, probe, &vec![eps; m], mode)?;
    Ok(inner.scale(1.0 / eps)?)
}

/// `ñⱼᵗ(h(yⱼ+εⱼñⱼ) - h(yⱼ))` per sample.
fn probe_inner(
    d: &mut dyn Denoise,
    y: &Tensor,
    h: &Tensor,
    probe: &Tensor,
    eps: &[f64],
    mode: Mode,
) -> Result<Tensor> {
    let probe = probe.detach();
    let y_pert = perturb(y, &probe, eps)?;
    let h_pert = d.denoise_probe(&y_pert, mode)?;
    Ok(h_pert.sub(h)?.mul(&probe)?.reduce_sum(&sample_axes(y))?)
}

/// Central finite-difference divergence `Σᵢ [hᵢ(y+δeᵢ) - hᵢ(y-δeᵢ)] / 2δ` for
/// every sample of `y`, one value per sample. Evaluated in eval mode so that
/// samples do not interact.
pub fn exact_divergence_fd(d: &mut dyn Denoise, y: &Tensor, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(RiskError::InvalidParameter {
            what: "finite-difference step",
            value: step,
        });
    }
    let m = batch_size(y)?;
    let k = y.numel() / m;
    let sample_shape = &y.shape()[1..];
    const CHUNK: usize = 32;
    no_grad(|| {
        let mut out = Vec::with_capacity(m);
        for j in 0..m {
            let base = &y.data()[j * k..(j + 1) * k];
            let mut total = 0.0;
            let mut start = 0;
            while start < k {
                let n = CHUNK.min(k - start);
                // Rows 0..n are +δ at pixel start+r, rows n..2n are -δ.
                let mut data = Vec::with_capacity(2 * n * k);
                for sign in [1.0, -1.0] {
                    for r in 0..n {
                        let mut img = base.to_vec();
                        img[start + r] += sign * step;
                        data.extend(img);
                    }
                }
                let mut shape = vec![2 * n];
                shape.extend_from_slice(sample_shape);
                let h = d.denoise(&Tensor::new(data, &shape)?, Mode::Eval)?;
                let hd = h.data();
                for r in 0..n {
                    let i = start + r;
                    total += (hd[r * k + i] - hd[(n + r) * k + i]) / (2.0 * step);
                }
                start += n;
            }
            out.push(total);
        }
        Ok(out)
    })
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(RiskError::InvalidParameter {
            what: "epsilon",
            value: eps,
        });
    }
    Ok(())
}

fn non_finite(objective: ObjectiveKind, eps: f64, e: RiskError) -> RiskError {
    match e {
        RiskError::Tensor(t @ TensorError::NonFinite { .. }) => RiskError::NonFinite {
            objective: objective.as_str(),
            epsilon: eps,
            detail: t.to_string(),
        },
        other => other,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Shared body of the SURE family with per-sample σⱼ and εⱼ (intensity units).
fn sure_core(
    objective: ObjectiveKind,
    d: &mut dyn Denoise,
    y: &Tensor,
    sigma: &[f64],
    eps: &[f64],
    probe: &Tensor,
    mode: Mode,
) -> Result<(RiskValue, Tensor)> {
    let m = batch_size(y)?;
    same_shape(objective.as_str(), y, probe)?;
    if sigma.len() != m || eps.len() != m {
        return Err(RiskError::SigmaCount {
            expected: m,
            got: sigma.len().min(eps.len()),
        });
    }
    for &s in sigma {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(RiskError::InvalidParameter { what: "sigma", value: s });
        }
    }
    for &e in eps {
        check_eps(e)?;
    }
    let k = (y.numel() / m) as f64;
    let mut run = || -> Result<(RiskValue, Tensor)> {
        let h = d.denoise(y, mode)?;
        let fidelity = per_sample_sq(&y.sub(&h)?)?;
        let inner = probe_inner(d, y, &h, probe, eps, mode)?;
        let correction: Vec<f64> = sigma.iter().map(|s| k * s * s).collect();
        let coef: Vec<f64> = sigma.iter().zip(eps).map(|(s, e)| 2.0 * s * s / e).collect();
        let flat = |v: &[f64]| per_sample_column(v, 1);
        let div_term = inner.mul(&flat(&coef)?)?;
        let per_sample = fidelity.sub(&flat(&correction)?)?.add(&div_term)?;
        let loss = per_sample.mean_all()?;
        let divergence: Vec<f64> = inner.data().iter().zip(eps).map(|(v, e)| v / e).collect();
        let report = LossReport {
            loss: loss.item()?,
            mse_vs_gt: None,
            divergence_estimate: mean(&divergence),
            data_fidelity: mean(fidelity.data()),
            noise_correction: mean(&correction),
            divergence_term: mean(div_term.data()),
        };
        Ok((RiskValue { loss, report }, h.detach()))
    };
    run().map_err(|e| non_finite(objective, eps[0], e))
}

/// Minibatch MC-SURE with a fixed σ and ε and an explicit Gaussian probe.
pub fn sure_loss_with_probe(
    d: &mut dyn Denoise,
    y: &Tensor,
    sigma: f64,
    eps: f64,
    probe: &Tensor,
    mode: Mode,
) -> Result<RiskValue> {
    let m = batch_size(y)?;
    sure_core(ObjectiveKind::Sure, d, y, &vec![sigma; m], &vec![eps; m], probe, mode).map(|(v, _)| v)
}

/// Minibatch MC-SURE drawing a fresh Gaussian probe from `rng`.
pub fn sure_loss(
    d: &mut dyn Denoise,
    y: &Tensor,
    sigma: f64,
    eps: f64,
    rng: &mut NoiseRng,
    mode: Mode,
) -> Result<RiskValue> {
    let probe = perturb_gaussian(y.shape(), rng);
    sure_loss_with_probe(d, y, sigma, eps, &probe, mode)
}

/// MC-SURE with a noise level and probe step per sample.
pub fn blind_sure_loss_with_probe(
    d: &mut dyn Denoise,
    y: &Tensor,
    sigma: &[f64],
    eps: &[f64],
    probe: &Tensor,
    mode: Mode,
) -> Result<RiskValue> {
    sure_core(ObjectiveKind::BlindSure, d, y, sigma, eps, probe, mode).map(|(v, _)| v)
}

/// Blind MC-SURE; `sigma` is per sample in intensity units and ε⁽ʲ⁾ comes
/// from `rule` applied to σ⁽ʲ⁾ on the 0-255 scale.
pub fn blind_sure_loss(
    d: &mut dyn Denoise,
    y: &Tensor,
    sigma: &[f64],
    rule: EpsilonRule,
    rng: &mut NoiseRng,
    mode: Mode,
) -> Result<RiskValue> {
    let eps: Vec<f64> = sigma.iter().map(|s| rule.epsilon(s * 255.0)).collect();
    let probe = perturb_gaussian(y.shape(), rng);
    blind_sure_loss_with_probe(d, y, sigma, &eps, &probe, mode)
}

/// Single-image SURE for refinement. Parameter freezing is the denoiser's
/// business (see `Denoiser::apply_param_mask`).
pub fn sure_ft_loss_with_probe(
    d: &mut dyn Denoise,
    y: &Tensor,
    sigma: f64,
    eps: f64,
    probe: &Tensor,
    mode: Mode,
) -> Result<RiskValue> {
    if batch_size(y)? != 1 {
        return Err(RiskError::ShapeMismatch {
            op: "sure_ft_loss",
            lhs: y.shape().to_vec(),
            rhs: vec![1],
        });
    }
    sure_core(ObjectiveKind::SureFt, d, y, &[sigma], &[eps], probe, mode).map(|(v, _)| v)
}

pub fn sure_ft_loss(
    d: &mut dyn Denoise,
    y: &Tensor,
    sigma: f64,
    eps: f64,
    rng: &mut NoiseRng,
    mode: Mode,
) -> Result<RiskValue> {
    let probe = perturb_gaussian(y.shape(), rng);
    sure_ft_loss_with_probe(d, y, sigma, eps, &probe, mode)
}

/// Warning text when `zeta` is past the range where PURE trains reliably.
pub fn pure_zeta_warning(zeta: f64) -> Option<String> {
    (zeta > PURE_ZETA_WARN).then(|| {
        format!("PURE with zeta = {zeta} > {PURE_ZETA_WARN}: estimator variance is high and training may not converge")
    })
}

/// PURE with an explicit ±1 probe.
pub fn pure_loss_with_probe(
    d: &mut dyn Denoise,
    y: &Tensor,
    zeta: f64,
    eps: f64,
    probe: &Tensor,
    mode: Mode,
) -> Result<RiskValue> {
    pure_core(d, y, zeta, eps, probe, mode).map(|(v, _)| v)
}

fn pure_core(
    d: &mut dyn Denoise,
    y: &Tensor,
    zeta: f64,
    eps: f64,
    probe: &Tensor,
    mode: Mode,
) -> Result<(RiskValue, Tensor)> {
    if !(zeta > 0.0 && zeta.is_finite()) {
        return Err(RiskError::InvalidParameter { what: "zeta", value: zeta });
    }
    check_eps(eps)?;
    same_shape("pure_loss", y, probe)?;
    let m = batch_size(y)?;
    let mut run = || -> Result<(RiskValue, Tensor)> {
        let h = d.denoise(y, mode)?;
        let fidelity = per_sample_sq(&y.sub(&h)?)?;
        let weighted = probe.detach().mul(y)?;
        let y_pert = perturb(y, probe, &vec![eps; m])?;
        let h_pert = d.denoise_probe(&y_pert, mode)?;
        let inner = h_pert.sub(&h)?.mul(&weighted)?.reduce_sum(&sample_axes(y))?;
        let correction: Vec<f64> = y
            .data()
            .chunks(y.numel() / m)
            .map(|c| zeta * c.iter().sum::<f64>())
            .collect();
        let div_term = inner.scale(2.0 * zeta / eps)?;
        let per_sample = fidelity.sub(&per_sample_column(&correction, 1)?)?.add(&div_term)?;
        let loss = per_sample.mean_all()?;
        let report = LossReport {
            loss: loss.item()?,
            mse_vs_gt: None,
            divergence_estimate: mean(inner.data()) / eps,
            data_fidelity: mean(fidelity.data()),
            noise_correction: mean(&correction),
            divergence_term: mean(div_term.data()),
        };
        Ok((RiskValue { loss, report }, h.detach()))
    };
    run().map_err(|e| non_finite(ObjectiveKind::Pure, eps, e))
}

/// PURE drawing a fresh Rademacher probe; warns (once per call) for large ζ.
pub fn pure_loss(
    d: &mut dyn Denoise,
    y: &Tensor,
    zeta: f64,
    eps: f64,
    rng: &mut NoiseRng,
    mode: Mode,
) -> Result<RiskValue> {
    if let Some(w) = pure_zeta_warning(zeta) {
        log::warn!("{w}");
    }
    let probe = perturb_binary(y.shape(), rng);
    pure_loss_with_probe(d, y, zeta, eps, &probe, mode)
}

/// Everything an objective may read from a batch. `clean` is only touched by
/// `mse_gt` and by the diagnostic `mse_vs_gt` field.
#[derive(Debug, Clone, Copy)]
pub struct RiskInputs<'a> {
    pub y: &'a Tensor,
    pub clean: Option<&'a Tensor>,
    /// Per-sample σ in intensity units (Gaussian objectives).
    pub sigma: &'a [f64],
    /// Poisson gain (PURE).
    pub zeta: Option<f64>,
    pub arch: ArchTag,
}

/// Evaluates `objective` on one batch with the given probe (ignored by the
/// MSE objectives).
pub fn evaluate(
    objective: &RiskObjective,
    d: &mut dyn Denoise,
    inputs: RiskInputs<'_>,
    probe: &Tensor,
    mode: Mode,
) -> Result<RiskValue> {
    let y = inputs.y;
    let m = batch_size(y)?;
    let sigma_at = |j: usize| -> Result<f64> {
        inputs.sigma.get(j).copied().ok_or(RiskError::SigmaCount {
            expected: m,
            got: inputs.sigma.len(),
        })
    };
    let (mut value, h) = match objective.kind {
        ObjectiveKind::MseGt | ObjectiveKind::MseReg => {
            let target = if objective.kind == ObjectiveKind::MseGt {
                inputs.clean.ok_or(RiskError::MissingGroundTruth("mse_gt"))?
            } else {
                y
            };
            let h = d.denoise(y, mode)?;
            let loss = mse_loss(&h, target)?;
            let v = loss.item()?;
            if !v.is_finite() {
                return Err(RiskError::NonFinite {
                    objective: objective.kind.as_str(),
                    epsilon: 0.0,
                    detail: "loss".into(),
                });
            }
            let mse_vs_gt = inputs
                .clean
                .map(|x| mse_loss(&h.detach(), x).and_then(|t| Ok(t.item()?)))
                .transpose()?;
            return Ok(RiskValue {
                loss,
                report: LossReport {
                    loss: v,
                    mse_vs_gt,
                    data_fidelity: v,
                    ..Default::default()
                },
            });
        }
        ObjectiveKind::Sure | ObjectiveKind::SureFt | ObjectiveKind::BlindSure => {
            let sigma: Vec<f64> = (0..m).map(sigma_at).collect::<Result<_>>()?;
            let eps: Vec<f64> = sigma
                .iter()
                .map(|s| objective.epsilon_for(inputs.arch, s * 255.0))
                .collect();
            sure_core(objective.kind, d, y, &sigma, &eps, probe, mode)?
        }
        ObjectiveKind::Pure => {
            let zeta = inputs.zeta.ok_or(RiskError::InvalidParameter {
                what: "zeta",
                value: f64::NAN,
            })?;
            let eps = objective.epsilon_for(inputs.arch, 0.0);
            pure_core(d, y, zeta, eps, probe, mode)?
        }
    };
    if let Some(x) = inputs.clean {
        // Diagnostic only; computed from the detached output.
        value.report.mse_vs_gt = Some(mse_loss(&h, x)?.item()?);
    }
    Ok(value)
}

/// Draws the probe an objective expects: Gaussian for SURE kinds, ±1 for PURE.
pub fn draw_probe(kind: ObjectiveKind, shape: &[usize], rng: &mut NoiseRng) -> Tensor {
    if kind.is_poisson() {
        perturb_binary(shape, rng)
    } else {
        perturb_gaussian(shape, rng)
    }
}
