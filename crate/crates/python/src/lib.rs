//! Python bindings. Images cross the boundary as flat `list[float]` plus a
//! shape, batches as `[N, C, H, W]` and single images as `[C, H, W]`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sure_denoise::checkpoint::Checkpoint;
use sure_denoise::data::{self, SyntheticKind};
use sure_denoise::nn::{self, Architecture, Mode};
use sure_denoise::noise::{NoiseRng, NoiseSpec, Stream};
use sure_denoise::risk::{self, ObjectiveKind, RiskInputs, RiskObjective};
use sure_denoise::tensor::{no_grad, Tensor};
use sure_denoise::train::{self, EpochLog, RefineConfig, TrainConfig, TrainData, TrainError};

create_exception!(sure_denoise, NumericalError, PyRuntimeError);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::NumericalAbort { .. } => NumericalError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn tensor(data: Vec<f64>, shape: &[usize]) -> PyResult<Tensor> {
    Tensor::new(data, shape).map_err(value_err)
}

fn batch(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    match shape.as_slice() {
        [c, h, w] => tensor(data, &[1, *c, *h, *w]),
        [_, _, _, _] => tensor(data, &shape),
        other => Err(PyValueError::new_err(format!("expected a [C,H,W] or [N,C,H,W] shape, got {other:?}"))),
    }
}

fn noise_spec(sigma: Option<f64>, zeta: Option<f64>) -> PyResult<Option<NoiseSpec>> {
    let spec = match (sigma, zeta) {
        (Some(_), Some(_)) => return Err(PyValueError::new_err("pass sigma or zeta, not both")),
        (Some(sigma), None) => NoiseSpec::Gaussian { sigma },
        (None, Some(zeta)) => NoiseSpec::Poisson { zeta },
        (None, None) => return Ok(None),
    };
    spec.validate().map_err(value_err)?;
    Ok(Some(spec))
}

fn history_dicts<'py>(py: Python<'py>, rows: &[EpochLog]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    rows.iter()
        .map(|h| {
            let d = PyDict::new(py);
            d.set_item("epoch", h.epoch)?;
            d.set_item("objective", h.objective.as_str())?;
            d.set_item("loss", h.loss)?;
            d.set_item("mse_vs_gt", h.mse_vs_gt)?;
            d.set_item("divergence_estimate", h.divergence_estimate)?;
            d.set_item("data_fidelity", h.data_fidelity)?;
            d.set_item("val_psnr", h.val_psnr)?;
            d.set_item("lr", h.lr)?;
            Ok(d)
        })
        .collect()
}

/// A trainable denoiser (`sda` or `dncnn_lite`).
#[pyclass(name = "Denoiser", module = "sure_denoise", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDenoiser {
    inner: nn::Denoiser,
}

#[pymethods]
impl PyDenoiser {
    #[staticmethod]
    #[pyo3(signature = (seed=0, in_channels=1))]
    fn sda(seed: u64, in_channels: usize) -> PyResult<Self> {
        let inner = nn::build_sda(in_channels, seed).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (depth=7, channels=32, seed=0, in_channels=1))]
    fn dncnn_lite(depth: usize, channels: usize, seed: u64, in_channels: usize) -> PyResult<Self> {
        let arch = Architecture::DncnnLite {
            in_channels,
            depth,
            channels,
        };
        let inner = nn::Denoiser::build(arch, seed).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(value_err)?;
        let inner = ckpt.to_denoiser().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[pyo3(signature = (path, seed=0, epoch=0))]
    fn save(&self, path: PathBuf, seed: u64, epoch: usize) -> PyResult<()> {
        Checkpoint::from_denoiser(&self.inner, None, seed, epoch)
            .save(&path)
            .map_err(value_err)
    }

    #[getter]
    fn architecture(&self) -> &'static str {
        self.inner.tag().as_str()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Eval-mode output for one image or a batch; returns a flat list of the
    /// same length.
    fn denoise(&mut self, py: Python<'_>, data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
        let y = batch(data, shape)?;
        let d = &mut self.inner;
        let out = py.detach(|| d.predict(&y)).map_err(value_err)?;
        Ok(out.to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Denoiser({}, {} parameters)", self.architecture(), self.num_parameters())
    }
}

/// Images with optional clean and noisy versions and per-image σ.
#[pyclass(name = "Dataset", module = "sure_denoise", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn from_clean(data: Vec<f64>, count: usize, height: usize, width: usize) -> PyResult<Self> {
        let shape = data::ImageShape::gray(height, width);
        if data.len() != count * shape.numel() {
            return Err(PyValueError::new_err(format!(
                "{} values do not make {count} images of {height}x{width}",
                data.len()
            )));
        }
        let inner = data::Dataset::from_clean("python", shape, data).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (images, labels=None, limit=None))]
    fn mnist(images: PathBuf, labels: Option<PathBuf>, limit: Option<usize>) -> PyResult<Self> {
        let ds = data::load_mnist_idx(&images, labels.as_deref()).map_err(value_err)?;
        let inner = match limit {
            Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
            _ => ds,
        };
        Ok(Self { inner })
    }

    /// `kind` is one of `strokes`, `gradients`, `checker`.
    #[staticmethod]
    #[pyo3(signature = (kind, count, height=28, width=28, seed=0))]
    fn synthetic(kind: &str, count: usize, height: usize, width: usize, seed: u64) -> PyResult<Self> {
        let kind = match kind {
            "strokes" => SyntheticKind::Strokes,
            "gradients" => SyntheticKind::Gradients,
            "checker" => SyntheticKind::Checker,
            other => return Err(PyValueError::new_err(format!("unknown synthetic kind '{other}'"))),
        };
        let mut rng = NoiseRng::new(seed, Stream::Synthetic);
        let inner = data::generate_synthetic(count, (height, width), kind, &mut rng).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Gaussian (`sigma`, intensity units) or Poisson (`zeta`) corruption.
    #[pyo3(signature = (sigma=None, zeta=None, seed=0, round=0))]
    fn corrupt(&self, sigma: Option<f64>, zeta: Option<f64>, seed: u64, round: u64) -> PyResult<Self> {
        let spec = noise_spec(sigma, zeta)?.ok_or_else(|| PyValueError::new_err("pass sigma or zeta"))?;
        let inner = self.inner.corrupt(&spec, seed, round).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Seeded split into the first `first_len` shuffled images and the rest.
    fn split(&self, first_len: usize, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = self.inner.split(first_len, seed).map_err(value_err)?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    fn without_clean(&self) -> Self {
        Self {
            inner: self.inner.without_clean(),
        }
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.inner.shape();
        (s.channels, s.height, s.width)
    }

    #[getter]
    fn has_clean(&self) -> bool {
        self.inner.has_clean()
    }

    #[getter]
    fn has_noisy(&self) -> bool {
        self.inner.has_noisy()
    }

    fn clean_image(&self, i: usize) -> PyResult<Vec<f64>> {
        self.check_index(i)?;
        Ok(self.inner.clean_image(i).map_err(value_err)?.to_vec())
    }

    fn noisy_image(&self, i: usize) -> PyResult<Vec<f64>> {
        self.check_index(i)?;
        Ok(self.inner.noisy_image(i).map_err(value_err)?.to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

impl PyDataset {
    fn check_index(&self, i: usize) -> PyResult<()> {
        if i < self.inner.len() {
            Ok(())
        } else {
            Err(pyo3::exceptions::PyIndexError::new_err(i))
        }
    }
}

/// Trains `denoiser` in place and returns the per-epoch log as dicts.
#[pyfunction(name = "train")]
#[pyo3(signature = (denoiser, dataset, objective, epochs, batch_size, lr=1e-3, seed=0, sigma=None, zeta=None, epsilon=None, validation=None))]
#[allow(clippy::too_many_arguments)]
fn train_denoiser<'py>(
    py: Python<'py>,
    denoiser: &mut PyDenoiser,
    dataset: &PyDataset,
    objective: &str,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    sigma: Option<f64>,
    zeta: Option<f64>,
    epsilon: Option<f64>,
    validation: Option<PyRef<'py, PyDataset>>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let kind: ObjectiveKind = objective.parse().map_err(value_err)?;
    let objective = RiskObjective { kind, epsilon };
    let cfg = TrainConfig::new(objective, epochs, batch_size, lr, seed);
    let noise = noise_spec(sigma, zeta)?;
    let d = &mut denoiser.inner;
    let (train_ds, val_ds) = (&dataset.inner, validation.as_ref().map(|v| &v.inner));
    let outcome = py
        .detach(|| {
            let mut data = TrainData::new(train_ds);
            data.noise = noise;
            data.validation = val_ds;
            train::train(d, data, &cfg)
        })
        .map_err(train_err)?;
    for w in &outcome.warnings {
        PyErr::warn(py, &py.get_type::<pyo3::exceptions::PyUserWarning>(), &std::ffi::CString::new(w.as_str())?, 1)?;
    }
    history_dicts(py, &outcome.history)
}

/// Mean per-image PSNR (peak 1) of the denoiser on a dataset with clean and
/// noisy images.
#[pyfunction]
fn evaluate_psnr(py: Python<'_>, denoiser: &mut PyDenoiser, dataset: &PyDataset) -> PyResult<f64> {
    let d = &mut denoiser.inner;
    let ds = &dataset.inner;
    py.detach(|| train::evaluate_psnr(d, ds)).map_err(train_err)
}

/// SURE-based refinement on one noisy image. Returns the refined denoiser,
/// its output as a flat list and a summary dict.
#[pyfunction]
#[pyo3(signature = (denoiser, image, shape, sigma, epochs=75, seed=0, keep_best=true))]
#[allow(clippy::too_many_arguments)]
fn refine<'py>(
    py: Python<'py>,
    denoiser: &PyDenoiser,
    image: Vec<f64>,
    shape: Vec<usize>,
    sigma: f64,
    epochs: usize,
    seed: u64,
    keep_best: bool,
) -> PyResult<(PyDenoiser, Vec<f64>, Bound<'py, PyDict>)> {
    let y = batch(image, shape)?;
    let mut cfg = RefineConfig::new(sigma, seed);
    cfg.epochs = epochs;
    cfg.keep_best = keep_best;
    let ckpt = Checkpoint::from_denoiser(&denoiser.inner, None, seed, 0);
    let out = py.detach(|| train::refine(&ckpt, &y, &cfg)).map_err(train_err)?;
    let refined = out.checkpoint.to_denoiser().map_err(value_err)?;
    let summary = PyDict::new(py);
    summary.set_item("sure_before", out.sure_before)?;
    summary.set_item("sure_after", out.sure_after)?;
    summary.set_item("best_epoch", out.best_epoch)?;
    Ok((PyDenoiser { inner: refined }, out.denoised.to_vec(), summary))
}

/// One evaluation of a training objective on a batch (eval mode, no
/// update). Returns a dict of the loss components.
#[pyfunction(name = "risk")]
#[pyo3(signature = (denoiser, objective, noisy, shape, sigma=None, zeta=None, clean=None, epsilon=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn evaluate_risk<'py>(
    py: Python<'py>,
    denoiser: &mut PyDenoiser,
    objective: &str,
    noisy: Vec<f64>,
    shape: Vec<usize>,
    sigma: Option<f64>,
    zeta: Option<f64>,
    clean: Option<Vec<f64>>,
    epsilon: Option<f64>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let kind: ObjectiveKind = objective.parse().map_err(value_err)?;
    let y = batch(noisy, shape.clone())?;
    let x = clean.map(|c| batch(c, shape)).transpose()?;
    let m = y.shape()[0];
    let sigmas = vec![sigma.unwrap_or(0.0); m];
    let mut rng = NoiseRng::new(seed, Stream::Probe);
    let probe = risk::draw_probe(kind, y.shape(), &mut rng);
    let d = &mut denoiser.inner;
    let inputs = RiskInputs {
        y: &y,
        clean: x.as_ref(),
        sigma: &sigmas,
        zeta,
        arch: d.tag(),
    };
    let objective = RiskObjective { kind, epsilon };
    let v = no_grad(|| risk::evaluate(&objective, d, inputs, &probe, Mode::Eval)).map_err(value_err)?;
    let r = v.report;
    let out = PyDict::new(py);
    out.set_item("loss", r.loss)?;
    out.set_item("data_fidelity", r.data_fidelity)?;
    out.set_item("noise_correction", r.noise_correction)?;
    out.set_item("divergence_term", r.divergence_term)?;
    out.set_item("divergence_estimate", r.divergence_estimate)?;
    out.set_item("mse_vs_gt", r.mse_vs_gt)?;
    Ok(out)
}

/// Default probe step for an architecture at noise level `sigma_255`.
#[pyfunction]
fn epsilon_rule(architecture: &str, sigma_255: f64) -> PyResult<f64> {
    let tag = match architecture {
        "sda" => nn::ArchTag::Sda,
        "dncnn_lite" => nn::ArchTag::DncnnLite,
        other => return Err(PyValueError::new_err(format!("unknown architecture '{other}'"))),
    };
    Ok(risk::epsilon_rule(tag, sigma_255))
}

#[pyfunction]
#[pyo3(signature = (a, b, peak=1.0))]
fn psnr(a: Vec<f64>, b: Vec<f64>, peak: f64) -> PyResult<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(PyValueError::new_err("inputs must be non-empty and of equal length"));
    }
    Ok(data::psnr_slices(&a, &b, peak))
}

#[pymodule(name = "sure_denoise")]
pub fn sure_denoise_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDenoiser>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(train_denoiser, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_psnr, m)?)?;
    m.add_function(wrap_pyfunction!(refine, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_risk, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon_rule, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    Ok(())
}
