//! Gaussian and Poisson corruption, Monte-Carlo probe vectors, and the
//! seeded random streams behind them.
//!
//! All randomness comes from ChaCha8 keyed by a 64-bit master seed. Each
//! consumer draws from its own ChaCha stream id, so corruption noise, probe
//! vectors and noise-level sampling never share state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("noise level must be positive, got {0}")]
    NonPositiveLevel(f64),
    #[error("invalid sigma range [{lo}, {hi}]")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("poisson corruption needs non-negative intensities; pixel {index} is {value}")]
    NegativePixel { index: usize, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Disjoint random substreams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Corruption = 1,
    Probe = 2,
    Sigma = 3,
    Shuffle = 4,
    Init = 5,
    Patches = 6,
    Synthetic = 7,
    Evaluation = 8,
}

/// Seeded generator: ChaCha8 with the stream id selecting the keystream.
#[derive(Debug, Clone)]
pub struct NoiseRng {
    inner: ChaCha8Rng,
}

impl NoiseRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, stream as u64)
    }

    /// Sub-stream `index` of `stream`, e.g. one per epoch or per worker.
    pub fn substream(seed: u64, stream: Stream, index: u64) -> Self {
        Self::with_stream_id(seed, ((stream as u64) << 48) | (index & 0xffff_ffff_ffff))
    }

    fn with_stream_id(seed: u64, id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(id);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn poisson(&mut self, mean: f64) -> u64 {
        poisson_sample(self, mean)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Noise description; `sigma` and the range are in [0, 1] intensity units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Gaussian { sigma: f64 },
    GaussianRange { lo: f64, hi: f64 },
    Poisson { zeta: f64 },
}

impl NoiseSpec {
    /// Gaussian noise given on the 0-255 scale.
    pub fn gaussian_255(sigma: f64) -> Self {
        NoiseSpec::Gaussian {
            sigma: sigma / 255.0,
        }
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        match *self {
            NoiseSpec::Gaussian { sigma } if !(sigma > 0.0) => {
                Err(NoiseError::NonPositiveLevel(sigma))
            }
            NoiseSpec::GaussianRange { lo, hi } if !(lo >= 0.0 && lo < hi) => {
                Err(NoiseError::InvalidRange { lo, hi })
            }
            NoiseSpec::Poisson { zeta } if !(zeta > 0.0) => Err(NoiseError::NonPositiveLevel(zeta)),
            _ => Ok(()),
        }
    }
}

pub fn corrupt_gaussian(x: &Tensor, sigma: f64, rng: &mut NoiseRng) -> Result<Tensor, NoiseError> {
    if !(sigma > 0.0) {
        return Err(NoiseError::NonPositiveLevel(sigma));
    }
    let data = x.data().iter().map(|v| v + sigma * rng.normal()).collect();
    Ok(Tensor::new(data, x.shape())?)
}

/// `y = zeta * Poisson(x / zeta)`, so `E[y] = x` and `Var[y] = zeta * x`.
pub fn corrupt_poisson(x: &Tensor, zeta: f64, rng: &mut NoiseRng) -> Result<Tensor, NoiseError> {
    if !(zeta > 0.0) {
        return Err(NoiseError::NonPositiveLevel(zeta));
    }
    if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(NoiseError::NegativePixel { index, value });
    }
    let data = x
        .data()
        .iter()
        .map(|v| zeta * rng.poisson(v / zeta) as f64)
        .collect();
    Ok(Tensor::new(data, x.shape())?)
}

/// Standard normal probe vector.
pub fn perturb_gaussian(shape: &[usize], rng: &mut NoiseRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal()).collect();
    Tensor::new(data, shape).expect("length matches shape")
}

/// Rademacher probe vector with entries in {-1, +1}.
pub fn perturb_binary(shape: &[usize], rng: &mut NoiseRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.coin() { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(data, shape).expect("length matches shape")
}

pub fn sample_sigma(lo: f64, hi: f64, rng: &mut NoiseRng) -> Result<f64, NoiseError> {
    if !(lo >= 0.0 && lo <= hi) {
        return Err(NoiseError::InvalidRange { lo, hi });
    }
    if lo == hi {
        return Ok(lo);
    }
    Ok(rng.uniform_range(lo, hi))
}

const PTRS_THRESHOLD: f64 = 10.0;

/// Inversion by sequential search for small means, PTRS (Hörmann 1993)
/// above [`PTRS_THRESHOLD`].
fn poisson_sample(rng: &mut NoiseRng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    if mean < PTRS_THRESHOLD {
        let mut k = 0u64;
        let mut p = (-mean).exp();
        let mut cdf = p;
        let u = rng.uniform();
        while u > cdf {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
            if p < f64::MIN_POSITIVE {
                break;
            }
        }
        return k;
    }
    let slam = mean.sqrt();
    let loglam = mean.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.uniform() - 0.5;
        let v = rng.uniform();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if (v * inv_alpha / (a / (us * us) + b)).ln() <= -mean + k * loglam - ln_factorial(k) {
            return k as u64;
        }
    }
}

fn ln_factorial(k: f64) -> f64 {
    if k < 10.0 {
        (1..=k as u64).map(|i| (i as f64).ln()).sum()
    } else {
        // Stirling series, accurate to ~1e-10 from k = 10 upward.
        let k1 = k + 1.0;
        (k1 - 0.5) * k1.ln() - k1 + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * k1)
            - 1.0 / (360.0 * k1.powi(3))
            + 1.0 / (1260.0 * k1.powi(5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn gaussian_corruption_moments() {
        let k = 1_000_000;
        let x = Tensor::full(&[k], 0.3);
        let sigma = 0.2;
        let y = corrupt_gaussian(&x, sigma, &mut NoiseRng::new(11, Stream::Corruption)).unwrap();
        let diff: Vec<f64> = y.data().iter().map(|v| v - 0.3).collect();
        let (mean, var) = moments(&diff);
        let n = k as f64;
        assert!(mean.abs() < 4.0 * sigma / n.sqrt(), "mean {mean}");
        // Var of the sample variance is 2 sigma^4 / (n - 1).
        let se_var = (2.0 * sigma.powi(4) / (n - 1.0)).sqrt();
        assert!((var - sigma * sigma).abs() < 4.0 * se_var, "var {var}");
        assert!((var.sqrt() - sigma).abs() < 3.0 / n.sqrt());
    }

    #[test]
    fn gaussian_corruption_psnr_matches_sigma() {
        // PSNR of y vs x at sigma = 25/255 on unit-range images is 20 log10(255/25).
        let x = Tensor::full(&[100, 28, 28], 0.5);
        let sigma = 25.0 / 255.0;
        let y = corrupt_gaussian(&x, sigma, &mut NoiseRng::new(3, Stream::Corruption)).unwrap();
        let mse = y
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / x.numel() as f64;
        let psnr = 10.0 * (1.0 / mse).log10();
        let expected = 20.0 * (255.0f64 / 25.0).log10();
        assert!((psnr - expected).abs() < 0.05, "{psnr} vs {expected}");
    }

    #[test]
    fn same_seed_same_noise() {
        let x = Tensor::full(&[64], 0.5);
        let a = corrupt_gaussian(&x, 0.1, &mut NoiseRng::new(5, Stream::Corruption)).unwrap();
        let b = corrupt_gaussian(&x, 0.1, &mut NoiseRng::new(5, Stream::Corruption)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(x.data(), &[0.5; 64][..]);
    }

    #[test]
    fn poisson_zero_pixel_stays_zero() {
        let x = Tensor::zeros(&[1000]);
        let y = corrupt_poisson(&x, 0.1, &mut NoiseRng::new(1, Stream::Corruption)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn poisson_moments_small_mean() {
        // x = 0.5, zeta = 0.1: mean x/zeta = 5 goes through inversion.
        let n = 100_000;
        let (x, zeta) = (0.5, 0.1);
        let y = corrupt_poisson(&Tensor::full(&[n], x), zeta, &mut NoiseRng::new(2, Stream::Corruption))
            .unwrap();
        let (mean, var) = moments(y.data());
        let std = (zeta * x).sqrt();
        assert!((mean - x).abs() < 3.0 * std / (n as f64).sqrt(), "mean {mean}");
        // Poisson fourth central moment gives the sampling error of the variance.
        let lam = x / zeta;
        let se_var = zeta * zeta * ((lam + 3.0 * lam * lam - lam * lam * (n as f64 - 3.0) / (n as f64 - 1.0)) / n as f64).sqrt();
        assert!((var - zeta * x).abs() < 4.0 * se_var, "var {var}");
    }

    #[test]
    fn poisson_moments_large_mean_uses_rejection() {
        let n = 100_000;
        let (x, zeta) = (0.8, 0.01);
        let y = corrupt_poisson(&Tensor::full(&[n], x), zeta, &mut NoiseRng::new(9, Stream::Corruption))
            .unwrap();
        let (mean, var) = moments(y.data());
        let std = (zeta * x).sqrt();
        assert!((mean - x).abs() < 4.0 * std / (n as f64).sqrt(), "mean {mean}");
        assert!((var / mean - zeta).abs() < 0.05 * zeta, "ratio {}", var / mean);
    }

    #[test]
    fn poisson_rejects_negative_pixels() {
        let x = Tensor::new(vec![0.1, -0.2], &[2]).unwrap();
        let err = corrupt_poisson(&x, 0.1, &mut NoiseRng::new(1, Stream::Corruption)).unwrap_err();
        assert!(matches!(err, NoiseError::NegativePixel { index: 1, .. }));
    }

    #[test]
    fn gaussian_probe_moments() {
        let p = perturb_gaussian(&[1_000_000], &mut NoiseRng::new(4, Stream::Probe));
        let (mean, var) = moments(p.data());
        assert!(mean.abs() < 4.0 / 1000.0);
        assert!((var - 1.0).abs() < 4.0 * (2.0f64 / 1e6).sqrt());
    }

    #[test]
    fn binary_probe_is_rademacher() {
        let p = perturb_binary(&[1_000_000], &mut NoiseRng::new(4, Stream::Probe));
        assert!(p.data().iter().all(|&v| v == 1.0 || v == -1.0));
        assert!(p.data().iter().all(|&v| v * v == 1.0));
        let (mean, _) = moments(p.data());
        assert!(mean.abs() < 4.0 / 1000.0);
    }

    #[test]
    fn streams_are_disjoint_and_fresh() {
        let a = perturb_gaussian(&[16], &mut NoiseRng::new(1, Stream::Probe));
        let b = perturb_gaussian(&[16], &mut NoiseRng::new(1, Stream::Corruption));
        assert_ne!(a.data(), b.data());
        let e0 = perturb_gaussian(&[16], &mut NoiseRng::substream(1, Stream::Probe, 0));
        let e1 = perturb_gaussian(&[16], &mut NoiseRng::substream(1, Stream::Probe, 1));
        assert_ne!(e0.data(), e1.data());
    }

    #[test]
    fn sigma_sampling() {
        let mut rng = NoiseRng::new(8, Stream::Sigma);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| sample_sigma(0.0, 55.0 / 255.0, &mut rng).unwrap())
            .collect();
        assert!(draws.iter().all(|&s| (0.0..=55.0 / 255.0).contains(&s)));
        let (mean, var) = moments(&draws);
        let se = (var / draws.len() as f64).sqrt();
        assert!((mean - 27.5 / 255.0).abs() < 4.0 * se);
        assert_eq!(sample_sigma(0.1, 0.1, &mut rng).unwrap(), 0.1);
        assert!(sample_sigma(0.3, 0.1, &mut rng).is_err());
    }

    #[test]
    fn noise_spec_validation() {
        assert!(NoiseSpec::gaussian_255(25.0).validate().is_ok());
        assert!(NoiseSpec::Gaussian { sigma: 0.0 }.validate().is_err());
        assert!(NoiseSpec::GaussianRange { lo: 0.2, hi: 0.1 }.validate().is_err());
        assert!(NoiseSpec::Poisson { zeta: -1.0 }.validate().is_err());
    }

    #[test]
    fn ln_factorial_matches_direct_sum() {
        for k in [10.0, 15.0, 40.0, 120.0] {
            let direct: f64 = (1..=k as u64).map(|i| (i as f64).ln()).sum();
            assert!((ln_factorial(k) - direct).abs() < 1e-9, "k={k}");
        }
    }
}
