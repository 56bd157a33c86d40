//! Brute-force checks of the risk estimators: divergence against finite
//! differences, SURE and PURE against the true MSE, and ε sweeps.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::nn::{Architecture, Denoise, Denoiser, Mode};
use crate::noise::{corrupt_gaussian, corrupt_poisson, perturb_binary, perturb_gaussian, NoiseError, NoiseRng, Stream};
use crate::risk::{
    exact_divergence_fd, mc_divergence, pure_loss_with_probe, sure_loss_with_probe, RiskError, RiskObjective,
    FD_STEP, PURE_ZETA_WARN,
};
use crate::tensor::{no_grad, Tensor};
use crate::train::{evaluate_psnr, train, EpochLog, TrainConfig, TrainData, TrainError};

/// Largest per-sample size the finite-difference divergence is run on.
pub const MAX_FD_PIXELS: usize = 4096;
/// Default pass threshold for statistical checks, in standard errors.
pub const STDERR_MULTIPLE: f64 = 4.0;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("input has {pixels} values per sample; the finite-difference oracle is limited to {max}")]
    TooLarge { pixels: usize, max: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, OracleError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Tolerance {
    /// Multiple of the measured standard error.
    StdErrors(f64),
    /// Fraction of `|oracle|`.
    Relative(f64),
    /// Fixed bound, for non-statistical comparisons.
    Absolute(f64),
}

impl Tolerance {
    pub fn bound(&self, oracle: f64, stderr: f64) -> f64 {
        match *self {
            Tolerance::StdErrors(k) => k * stderr,
            Tolerance::Relative(r) => r * oracle.abs(),
            Tolerance::Absolute(b) => b,
        }
    }
}

impl fmt::Display for Tolerance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tolerance::StdErrors(k) => write!(f, "{k} stderr"),
            Tolerance::Relative(r) => write!(f, "{}% relative", r * 100.0),
            Tolerance::Absolute(b) => write!(f, "{b} absolute"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub estimate: f64,
    pub oracle: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub samples: usize,
    pub stderr: f64,
    pub tolerance: Tolerance,
    pub pass: bool,
    /// Informational flag; never affects `pass`.
    #[serde(default)]
    pub elevated_variance: bool,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl OracleReport {
    pub fn new(name: impl Into<String>, estimate: f64, oracle: f64, samples: usize, stderr: f64, tolerance: Tolerance) -> Self {
        let abs_error = (estimate - oracle).abs();
        let rel_error = if oracle != 0.0 { abs_error / oracle.abs() } else { abs_error };
        Self {
            name: name.into(),
            estimate,
            oracle,
            abs_error,
            rel_error,
            samples,
            stderr,
            tolerance,
            pass: abs_error <= tolerance.bound(oracle, stderr),
            elevated_variance: false,
            notes: Vec::new(),
        }
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: estimate {:.6} oracle {:.6} |err| {:.3e} (rel {:.3e}) stderr {:.3e} n={} tol {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.estimate,
            self.oracle,
            self.abs_error,
            self.rel_error,
            self.stderr,
            self.samples,
            self.tolerance
        )?;
        if self.elevated_variance {
            write!(f, " [elevated estimator variance]")?;
        }
        for n in &self.notes {
            write!(f, "\n    {n}")?;
        }
        Ok(())
    }
}

/// Writes `reports` as pretty JSON to `json` and as text lines to `text`.
pub fn write_reports<T: Serialize + fmt::Display>(reports: &[T], json: &Path, text: &Path) -> Result<()> {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> OracleError + '_ {
        move |source| OracleError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
    let body = serde_json::to_string_pretty(reports).expect("reports serialize");
    std::fs::write(json, body).map_err(io(json))?;
    let lines: Vec<String> = reports.iter().map(|r| r.to_string()).collect();
    std::fs::write(text, lines.join("\n") + "\n").map_err(io(text))?;
    Ok(())
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs `task(worker_denoiser, i)` for `i in 0..n` on up to `threads` scoped
/// threads, each with its own clone of `d`. Results come back in index order.
fn fan_out<D, T, F>(d: &D, n: usize, threads: usize, task: F) -> Result<Vec<T>>
where
    D: Denoise + Clone + Send,
    T: Send,
    F: Fn(&mut D, usize) -> Result<T> + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        let mut local = d.clone();
        return (0..n).map(|i| task(&mut local, i)).collect();
    }
    let per = n.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let mut local = d.clone();
                let task = &task;
                s.spawn(move || {
                    (t * per..((t + 1) * per).min(n))
                        .map(|i| task(&mut local, i))
                        .collect::<Result<Vec<T>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().expect("oracle worker panicked")?);
        }
        Ok(out)
    })
}

fn repeat_sample(y: &Tensor, copies: usize) -> Result<Tensor> {
    let mut shape = y.shape().to_vec();
    shape[0] = copies;
    let data: Vec<f64> = (0..copies).flat_map(|_| y.data().iter().copied()).collect();
    Ok(Tensor::new(data, &shape)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceCheck {
    pub epsilon: f64,
    pub draws: usize,
    pub tolerance: Tolerance,
    pub seed: u64,
    /// Finite-difference step for the oracle.
    pub fd_step: f64,
    pub threads: usize,
}

impl DivergenceCheck {
    pub fn new(epsilon: f64, draws: usize, tolerance: Tolerance, seed: u64) -> Self {
        Self {
            epsilon,
            draws,
            tolerance,
            seed,
            fd_step: FD_STEP,
            threads: 1,
        }
    }
}

/// Mean of `draws` Monte-Carlo divergence estimates at a single input
/// `[1, C, H, W]` (or `[1, K]`) against the central finite-difference
/// divergence.
pub fn validate_divergence<D>(d: &D, y: &Tensor, check: &DivergenceCheck) -> Result<OracleReport>
where
    D: Denoise + Clone + Send,
{
    if y.rank() < 2 || y.shape()[0] != 1 {
        return Err(OracleError::Invalid(format!("expected a single sample, got shape {:?}", y.shape())));
    }
    let k = y.numel();
    if k > MAX_FD_PIXELS {
        return Err(OracleError::TooLarge {
            pixels: k,
            max: MAX_FD_PIXELS,
        });
    }
    if check.draws == 0 {
        return Err(OracleError::Invalid("draws must be >= 1".into()));
    }
    let exact = exact_divergence_fd(&mut d.clone(), y, check.fd_step)?[0];

    // Probes are stacked into batches; each draw has its own substream.
    let chunk = (65_536 / k).clamp(1, 256);
    let n_chunks = check.draws.div_ceil(chunk);
    let per_chunk = fan_out(d, n_chunks, check.threads, |local, c| {
        let lo = c * chunk;
        let hi = (lo + chunk).min(check.draws);
        let ys = repeat_sample(y, hi - lo)?;
        let mut probe = Vec::with_capacity(ys.numel());
        for i in lo..hi {
            let mut rng = NoiseRng::substream(check.seed, Stream::Probe, i as u64);
            probe.extend_from_slice(perturb_gaussian(&y.shape()[1..], &mut rng).data());
        }
        let probe = Tensor::new(probe, ys.shape())?;
        let est = no_grad(|| mc_divergence(local, &ys, check.epsilon, &probe, Mode::Eval))?;
        Ok(est.to_vec())
    })?;
    let estimates: Vec<f64> = per_chunk.into_iter().flatten().collect();
    let (mean, se) = mean_stderr(&estimates);
    let mut report = OracleReport::new("divergence", mean, exact, check.draws, se, check.tolerance);
    report.notes.push(format!(
        "epsilon {:e}, finite-difference step {:e}, K = {k}",
        check.epsilon, check.fd_step
    ));
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskCheck {
    pub realizations: usize,
    /// Threshold in standard errors of the paired difference.
    pub stderr_multiple: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub threads: usize,
}

impl RiskCheck {
    pub fn new(realizations: usize, epsilon: f64, seed: u64) -> Self {
        Self {
            realizations,
            stderr_multiple: STDERR_MULTIPLE,
            epsilon,
            seed,
            threads: 1,
        }
    }
}

/// Per-realization (estimate, true MSE) pairs over the whole clean batch.
fn risk_pairs<D, F>(d: &D, x_clean: &Tensor, check: &RiskCheck, estimate: F) -> Result<Vec<(f64, f64)>>
where
    D: Denoise + Clone + Send,
    F: Fn(&mut D, &Tensor, &mut NoiseRng, &mut NoiseRng) -> Result<(f64, Tensor)> + Sync,
{
    if check.realizations < 2 {
        return Err(OracleError::Invalid("need at least 2 realizations".into()));
    }
    let m = x_clean.shape().first().copied().unwrap_or(1).max(1) as f64;
    fan_out(d, check.realizations, check.threads, |local, r| {
        let mut noise_rng = NoiseRng::substream(check.seed, Stream::Evaluation, r as u64);
        let mut probe_rng = NoiseRng::substream(check.seed, Stream::Probe, r as u64);
        let (est, y) = estimate(local, x_clean, &mut noise_rng, &mut probe_rng)?;
        // The oracle side: true per-image squared error, from clean data only.
        let h = no_grad(|| local.denoise(&y, Mode::Eval)).map_err(RiskError::from)?;
        let sq: f64 = h.data().iter().zip(x_clean.data()).map(|(a, b)| (a - b).powi(2)).sum();
        Ok((est, sq / m))
    })
}

fn paired_report(name: &str, pairs: &[(f64, f64)], k: f64) -> OracleReport {
    let est: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mse: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let diff: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    let (mean_est, se_est) = mean_stderr(&est);
    let (mean_mse, _) = mean_stderr(&mse);
    let (_, se_diff) = mean_stderr(&diff);
    let mut r = OracleReport::new(name, mean_est, mean_mse, pairs.len(), se_diff, Tolerance::StdErrors(k));
    r.notes.push(format!("stderr of the estimate alone {se_est:.3e}"));
    r
}

/// Mean per-image SURE over independent noise realizations of `x_clean`
/// against the mean true squared error. `sigma` is in intensity units.
pub fn validate_unbiasedness<D>(d: &D, x_clean: &Tensor, sigma: f64, check: &RiskCheck) -> Result<OracleReport>
where
    D: Denoise + Clone + Send,
{
    let pairs = risk_pairs(d, x_clean, check, |local, x, noise_rng, probe_rng| {
        let y = corrupt_gaussian(x, sigma, noise_rng)?;
        let probe = perturb_gaussian(y.shape(), probe_rng);
        let v = no_grad(|| sure_loss_with_probe(local, &y, sigma, check.epsilon, &probe, Mode::Eval))?;
        Ok((v.report.loss, y))
    })?;
    let mut r = paired_report("unbiasedness", &pairs, check.stderr_multiple);
    r.notes.push(format!("sigma {sigma}, epsilon {:e}", check.epsilon));
    Ok(r)
}

/// Same design as [`validate_unbiasedness`] under Poisson corruption with
/// gain `zeta`. Flags elevated variance above the documented ζ range.
pub fn validate_pure<D>(d: &D, x_clean: &Tensor, zeta: f64, check: &RiskCheck) -> Result<OracleReport>
where
    D: Denoise + Clone + Send,
{
    let pairs = risk_pairs(d, x_clean, check, |local, x, noise_rng, probe_rng| {
        let y = corrupt_poisson(x, zeta, noise_rng)?;
        let probe = perturb_binary(y.shape(), probe_rng);
        let v = no_grad(|| pure_loss_with_probe(local, &y, zeta, check.epsilon, &probe, Mode::Eval))?;
        Ok((v.report.loss, y))
    })?;
    let mut r = paired_report("pure", &pairs, check.stderr_multiple);
    r.notes.push(format!("zeta {zeta}, epsilon {:e}", check.epsilon));
    if zeta > PURE_ZETA_WARN {
        r.elevated_variance = true;
        r.notes.push(format!(
            "zeta above {PURE_ZETA_WARN}: relative stderr {:.3e}",
            r.stderr / r.oracle.abs().max(f64::MIN_POSITIVE)
        ));
    }
    Ok(r)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub final_psnr: Option<f64>,
    pub final_loss: Option<f64>,
    /// Standard deviation of epoch-to-epoch loss changes.
    pub loss_noise: Option<f64>,
    /// `"ok"` or the reason the run did not finish.
    pub status: String,
    #[serde(skip)]
    pub checkpoint: Option<Checkpoint>,
    #[serde(skip)]
    pub history: Vec<EpochLog>,
}

impl fmt::Display for SweepRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        write!(
            f,
            "eps {:>8.1e}  psnr {:>8}  loss {:>10}  loss_noise {:>10}  {}",
            self.epsilon,
            opt(self.final_psnr),
            opt(self.final_loss),
            opt(self.loss_noise),
            self.status
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub architecture: Architecture,
    pub sigma: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Max minus min final PSNR over finished runs.
    pub fn psnr_spread(&self) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter_map(|r| r.final_psnr).collect();
        if v.is_empty() {
            return None;
        }
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        Some(hi - lo)
    }

    pub fn row(&self, epsilon: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.epsilon == epsilon)
    }

    /// An [`OracleReport`] on the spread; fails if any run did not finish.
    pub fn report(&self, max_spread: f64) -> OracleReport {
        let spread = self.psnr_spread().unwrap_or(f64::INFINITY);
        let all_ok = self.rows.iter().all(|r| r.status == "ok");
        let mut r = OracleReport::new(
            "epsilon_sweep",
            spread,
            0.0,
            self.rows.len(),
            0.0,
            Tolerance::Absolute(max_spread),
        );
        r.pass &= all_ok;
        r.notes.push("estimate is the PSNR spread in dB".into());
        r.notes.extend(self.rows.iter().map(|row| row.to_string()));
        r
    }
}

impl fmt::Display for SweepTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "epsilon sweep, {}, sigma {}", self.architecture.tag().as_str(), self.sigma)?;
        for r in &self.rows {
            writeln!(f, "  {r}")?;
        }
        match self.psnr_spread() {
            Some(s) => write!(f, "  PSNR spread {s:.4} dB"),
            None => write!(f, "  no run finished"),
        }
    }
}

fn loss_noise(losses: &[f64]) -> Option<f64> {
    if losses.len() < 3 {
        return None;
    }
    let diffs: Vec<f64> = losses.windows(2).map(|w| w[1] - w[0]).collect();
    let (_, se) = mean_stderr(&diffs);
    Some(se * (diffs.len() as f64).sqrt())
}

/// Trains one network per ε from the same initialization and reports the
/// final validation PSNR of each. Failed runs are recorded, not raised.
pub fn epsilon_sweep(
    arch: Architecture,
    data: TrainData<'_>,
    validation: &Dataset,
    base: &TrainConfig,
    grid: &[f64],
) -> Result<SweepTable> {
    if !validation.has_clean() || !validation.has_noisy() {
        return Err(OracleError::Invalid("validation set needs clean and noisy images".into()));
    }
    let sigma = match data.noise {
        Some(crate::noise::NoiseSpec::Gaussian { sigma }) => sigma,
        _ => data.train.sigma().and_then(|s| s.first().copied()).unwrap_or(f64::NAN),
    };
    let mut rows = Vec::with_capacity(grid.len());
    for &eps in grid {
        let mut cfg = base.clone();
        cfg.objective = RiskObjective::with_epsilon(base.objective.kind, eps);
        let mut d = Denoiser::build(arch, base.seed).map_err(TrainError::from)?;
        let row = match train(&mut d, data, &cfg) {
            Ok(out) => {
                let losses: Vec<f64> = out.history.iter().map(|h| h.loss).collect();
                SweepRow {
                    epsilon: eps,
                    final_psnr: Some(evaluate_psnr(&mut d, validation)?),
                    final_loss: losses.last().copied(),
                    loss_noise: loss_noise(&losses),
                    status: "ok".into(),
                    checkpoint: Some(out.checkpoint),
                    history: out.history,
                }
            }
            Err(e @ (TrainError::NumericalAbort { .. } | TrainError::Risk(_) | TrainError::Config(_))) => {
                log::warn!("epsilon {eps:e}: {e}");
                SweepRow {
                    epsilon: eps,
                    final_psnr: None,
                    final_loss: None,
                    loss_noise: None,
                    status: format!("aborted: {e}"),
                    checkpoint: None,
                    history: Vec::new(),
                }
            }
            Err(e) => return Err(e.into()),
        };
        log::info!("{row}");
        rows.push(row);
    }
    Ok(SweepTable {
        architecture: arch,
        sigma,
        rows,
    })
}
