//! Image datasets: MNIST IDX and PGM input, a synthetic generator, random
//! patch crops, shuffled minibatches and PSNR.
//!
//! Images are stored flat as `C x H x W` with intensities in [0, 1].

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{
    corrupt_gaussian, corrupt_poisson, sample_sigma, NoiseError, NoiseRng, NoiseSpec, Stream,
};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image dimensions {found:?} do not match expected {expected:?}")]
    DimMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("bad PGM header: {0}")]
    BadHeader(String),
    #[error("unsupported PGM maxval {0} (only 255)")]
    UnsupportedMaxval(u32),
    #[error("dataset '{0}' has no clean images")]
    NoGroundTruth(String),
    #[error("dataset '{0}' has no noisy images")]
    NoNoisy(String),
    #[error("patch {patch:?} does not fit in {height}x{width} images")]
    PatchTooLarge {
        patch: (usize, usize),
        height: usize,
        width: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn gray(height: usize, width: usize) -> Self {
        Self {
            channels: 1,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// A set of equally sized images. Clean images are optional so that
/// ground-truth-free training can be expressed (and checked) directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    shape: ImageShape,
    len: usize,
    clean: Option<Vec<f64>>,
    noisy: Option<Vec<f64>>,
    /// Per-sample Gaussian σ in intensity units.
    sigma: Option<Vec<f64>>,
    labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn from_clean(name: impl Into<String>, shape: ImageShape, clean: Vec<f64>) -> Result<Self> {
        Self::build(name.into(), shape, Some(clean), None)
    }

    /// A ground-truth-free dataset of noisy observations.
    pub fn from_noisy(name: impl Into<String>, shape: ImageShape, noisy: Vec<f64>) -> Result<Self> {
        Self::build(name.into(), shape, None, Some(noisy))
    }

    fn build(
        name: String,
        shape: ImageShape,
        clean: Option<Vec<f64>>,
        noisy: Option<Vec<f64>>,
    ) -> Result<Self> {
        let per = shape.numel();
        if per == 0 {
            return Err(DataError::Invalid(format!("empty image shape {shape:?}")));
        }
        let total = clean.as_ref().or(noisy.as_ref()).map_or(0, |v| v.len());
        if !total.is_multiple_of(per) {
            return Err(DataError::Invalid(format!(
                "{total} values is not a whole number of {per}-pixel images"
            )));
        }
        if let (Some(c), Some(n)) = (&clean, &noisy) {
            if c.len() != n.len() {
                return Err(DataError::Invalid("clean and noisy sizes differ".into()));
            }
        }
        Ok(Self {
            name,
            shape,
            len: total / per,
            clean,
            noisy,
            sigma: None,
            labels: None,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn has_clean(&self) -> bool {
        self.clean.is_some()
    }

    pub fn has_noisy(&self) -> bool {
        self.noisy.is_some()
    }

    pub fn clean(&self) -> Result<&[f64]> {
        self.clean
            .as_deref()
            .ok_or_else(|| DataError::NoGroundTruth(self.name.clone()))
    }

    pub fn noisy(&self) -> Result<&[f64]> {
        self.noisy
            .as_deref()
            .ok_or_else(|| DataError::NoNoisy(self.name.clone()))
    }

    pub fn sigma(&self) -> Option<&[f64]> {
        self.sigma.as_deref()
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.len {
            return Err(DataError::CountMismatch {
                images: self.len,
                labels: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_noisy(mut self, noisy: Vec<f64>, sigma: Option<Vec<f64>>) -> Result<Self> {
        if noisy.len() != self.len * self.shape.numel() {
            return Err(DataError::Invalid("noisy data size differs from dataset".into()));
        }
        if sigma.as_ref().is_some_and(|s| s.len() != self.len) {
            return Err(DataError::Invalid("one sigma per image expected".into()));
        }
        self.noisy = Some(noisy);
        self.sigma = sigma;
        Ok(self)
    }

    pub fn with_sigma(mut self, sigma: Option<Vec<f64>>) -> Result<Self> {
        if sigma.as_ref().is_some_and(|s| s.len() != self.len) {
            return Err(DataError::Invalid("one sigma per image expected".into()));
        }
        self.sigma = sigma;
        Ok(self)
    }

    /// Same dataset with the clean images dropped.
    pub fn without_clean(&self) -> Self {
        Self {
            clean: None,
            ..self.clone()
        }
    }

    fn image_slice(data: &[f64], per: usize, i: usize) -> &[f64] {
        &data[i * per..(i + 1) * per]
    }

    pub fn clean_image(&self, i: usize) -> Result<Tensor> {
        let per = self.shape.numel();
        Ok(Tensor::new(
            Self::image_slice(self.clean()?, per, i).to_vec(),
            &self.shape.dims(),
        )?)
    }

    pub fn noisy_image(&self, i: usize) -> Result<Tensor> {
        let per = self.shape.numel();
        Ok(Tensor::new(
            Self::image_slice(self.noisy()?, per, i).to_vec(),
            &self.shape.dims(),
        )?)
    }

    /// Images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let per = self.shape.numel();
        let gather = |v: &Vec<f64>| -> Vec<f64> {
            indices
                .iter()
                .flat_map(|&i| Self::image_slice(v, per, i).iter().copied())
                .collect()
        };
        let pick = |v: &Vec<f64>| -> Vec<f64> { indices.iter().map(|&i| v[i]).collect() };
        Self {
            name: self.name.clone(),
            shape: self.shape,
            len: indices.len(),
            clean: self.clean.as_ref().map(gather),
            noisy: self.noisy.as_ref().map(gather),
            sigma: self.sigma.as_ref().map(pick),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Seeded split into `(first, rest)` with `first_len` images.
    pub fn split(&self, first_len: usize, seed: u64) -> Result<(Self, Self)> {
        if first_len > self.len {
            return Err(DataError::Invalid(format!(
                "cannot take {first_len} of {} images",
                self.len
            )));
        }
        let mut order: Vec<usize> = (0..self.len).collect();
        NoiseRng::new(seed, Stream::Shuffle).shuffle(&mut order);
        Ok((self.subset(&order[..first_len]), self.subset(&order[first_len..])))
    }

    /// Noisy copy of the clean images. Image `i` uses corruption substream
    /// `round * len + i`, so any round can be regenerated independently.
    pub fn corrupt(&self, noise: &NoiseSpec, seed: u64, round: u64) -> Result<Self> {
        let (noisy, sigma) = corrupt_images(self.clean()?, self.shape, noise, seed, round)?;
        let mut out = self.clone();
        out.noisy = Some(noisy);
        out.sigma = sigma;
        Ok(out)
    }

    /// Stacks the given images into a batch.
    pub fn batch(&self, indices: &[usize], epoch: usize, index: usize) -> Result<Batch> {
        let per = self.shape.numel();
        let mut shape = vec![indices.len()];
        shape.extend(self.shape.dims());
        let stack = |v: &[f64]| -> Result<Tensor> {
            let data = indices
                .iter()
                .flat_map(|&i| Self::image_slice(v, per, i).iter().copied())
                .collect();
            Ok(Tensor::new(data, &shape)?)
        };
        let y = stack(self.noisy()?)?;
        let x = self.clean.as_deref().map(stack).transpose()?;
        let sigma = self
            .sigma
            .as_ref()
            .map(|s| indices.iter().map(|&i| s[i]).collect())
            .unwrap_or_default();
        Ok(Batch {
            y,
            x,
            sigma,
            indices: indices.to_vec(),
            epoch,
            index,
        })
    }

    /// Shuffled minibatches for one epoch; see [`epoch_batches`].
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
        epoch_batches(self.len, batch_size, seed, epoch)?
            .iter()
            .enumerate()
            .map(|(b, idx)| self.batch(idx, epoch, b))
            .collect()
    }
}

fn corrupt_images(
    clean: &[f64],
    shape: ImageShape,
    noise: &NoiseSpec,
    seed: u64,
    round: u64,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    noise.validate()?;
    let per = shape.numel();
    let n = clean.len() / per;
    let mut noisy = Vec::with_capacity(clean.len());
    let mut sigmas = Vec::with_capacity(n);
    for i in 0..n {
        let x = Tensor::new(clean[i * per..(i + 1) * per].to_vec(), &shape.dims())?;
        let index = round * n as u64 + i as u64;
        let mut rng = NoiseRng::substream(seed, Stream::Corruption, index);
        let y = match *noise {
            NoiseSpec::Gaussian { sigma } => {
                sigmas.push(sigma);
                corrupt_gaussian(&x, sigma, &mut rng)?
            }
            NoiseSpec::GaussianRange { lo, hi } => {
                let s = sample_sigma(lo, hi, &mut NoiseRng::substream(seed, Stream::Sigma, index))?;
                sigmas.push(s);
                if s > 0.0 {
                    corrupt_gaussian(&x, s, &mut rng)?
                } else {
                    x
                }
            }
            NoiseSpec::Poisson { zeta } => corrupt_poisson(&x, zeta, &mut rng).map_err(|e| match e {
                NoiseError::NegativePixel { index: p, value } => NoiseError::NegativePixel {
                    index: i * per + p,
                    value,
                },
                other => other,
            })?,
        };
        noisy.extend_from_slice(y.data());
    }
    let sigma = (!matches!(noise, NoiseSpec::Poisson { .. })).then_some(sigmas);
    Ok((noisy, sigma))
}

/// One minibatch. `x` is present only if the dataset has clean images.
#[derive(Debug, Clone)]
pub struct Batch {
    pub y: Tensor,
    pub x: Option<Tensor>,
    /// Per-sample σ (intensity units); empty when the dataset carries none.
    pub sigma: Vec<f64>,
    pub indices: Vec<usize>,
    pub epoch: usize,
    pub index: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Index lists for one epoch: a fresh permutation (shuffle substream
/// `epoch`) cut into chunks of `batch_size`, the last one possibly short.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > len {
        return Err(DataError::Invalid(format!(
            "batch size {batch_size} must be in 1..={len}"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    NoiseRng::substream(seed, Stream::Shuffle, epoch as u64).shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX image file (magic 0x00000803, 28x28 images).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows != MNIST_SIDE || cols != MNIST_SIDE {
        return Err(DataError::DimMismatch {
            expected: vec![MNIST_SIDE, MNIST_SIDE],
            found: vec![rows, cols],
        });
    }
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok((n, bytes[16..expected].iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Loads MNIST-style IDX files (optionally gzip-compressed).
pub fn load_mnist_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let (_, pixels) = parse_idx_images(&read_maybe_gz(images)?)?;
    let name = images
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mnist".into());
    let ds = Dataset::from_clean(name, ImageShape::gray(MNIST_SIDE, MNIST_SIDE), pixels)?;
    match labels {
        Some(path) => ds.with_labels(parse_idx_labels(&read_maybe_gz(path)?)?),
        None => Ok(ds),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Soft-edged bright strokes over a smooth dark background.
    Strokes,
    /// Piecewise-linear ramps in random directions.
    Gradients,
    /// Two-level checkerboard (0.2 / 0.8) with a random phase.
    Checker,
}

pub const CHECKER_PERIOD: usize = 8;
pub const CHECKER_LEVELS: (f64, f64) = (0.2, 0.8);

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn render_strokes(h: usize, w: usize, rng: &mut NoiseRng) -> Vec<f64> {
    let base = rng.uniform_range(0.0, 0.25);
    let tilt = (rng.uniform_range(-0.1, 0.1), rng.uniform_range(-0.1, 0.1));
    let mut img: Vec<f64> = (0..h * w)
        .map(|p| {
            let (i, j) = ((p / w) as f64 / h as f64, (p % w) as f64 / w as f64);
            base + tilt.0 * i + tilt.1 * j
        })
        .collect();
    let n_strokes = 2 + rng.below(4);
    for _ in 0..n_strokes {
        // Polyline of 2-4 segments.
        let mut pts = vec![(rng.uniform_range(0.0, h as f64), rng.uniform_range(0.0, w as f64))];
        for _ in 0..1 + rng.below(3) {
            let last = *pts.last().expect("non-empty");
            let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
            let len = rng.uniform_range(0.2, 0.6) * h.min(w) as f64;
            pts.push((last.0 + len * angle.sin(), last.1 + len * angle.cos()));
        }
        let half_width = rng.uniform_range(0.8, 2.5);
        let level = rng.uniform_range(0.6, 1.0);
        for (p, px) in img.iter_mut().enumerate() {
            let pos = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
            let dist = pts
                .windows(2)
                .map(|s| segment_distance(pos, s[0], s[1]))
                .fold(f64::INFINITY, f64::min);
            let cover = 1.0 - smoothstep(half_width - 0.75, half_width + 0.75, dist);
            *px = *px * (1.0 - cover) + level * cover;
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn render_gradients(h: usize, w: usize, rng: &mut NoiseRng) -> Vec<f64> {
    let ramp = |rng: &mut NoiseRng| {
        let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
        let lo = rng.uniform_range(0.05, 0.5);
        let hi = rng.uniform_range(0.5, 0.95);
        (angle.cos(), angle.sin(), lo, hi)
    };
    let eval = |r: (f64, f64, f64, f64), i: usize, j: usize| {
        let (u, v) = (i as f64 / h as f64 - 0.5, j as f64 / w as f64 - 0.5);
        let t = (r.0 * u + r.1 * v) / std::f64::consts::SQRT_2 + 0.5;
        r.2 + (r.3 - r.2) * t.clamp(0.0, 1.0)
    };
    let background = ramp(rng);
    let mut img: Vec<f64> = (0..h * w).map(|p| eval(background, p / w, p % w)).collect();
    for _ in 0..1 + rng.below(3) {
        let (i0, j0) = (rng.below(h), rng.below(w));
        let (i1, j1) = ((i0 + 4 + rng.below(h / 2 + 1)).min(h), (j0 + 4 + rng.below(w / 2 + 1)).min(w));
        let r = ramp(rng);
        for i in i0..i1 {
            for j in j0..j1 {
                img[i * w + j] = eval(r, i, j);
            }
        }
    }
    img
}

fn render_checker(h: usize, w: usize, rng: &mut NoiseRng) -> Vec<f64> {
    let (oi, oj) = (rng.below(CHECKER_PERIOD), rng.below(CHECKER_PERIOD));
    (0..h * w)
        .map(|p| {
            let (i, j) = (p / w + oi, p % w + oj);
            if (i / CHECKER_PERIOD + j / CHECKER_PERIOD).is_multiple_of(2) {
                CHECKER_LEVELS.1
            } else {
                CHECKER_LEVELS.0
            }
        })
        .collect()
}

/// `n` clean grayscale images of one synthetic family.
pub fn generate_synthetic(n: usize, size: (usize, usize), kind: SyntheticKind, rng: &mut NoiseRng) -> Result<Dataset> {
    let (h, w) = size;
    let mut data = Vec::with_capacity(n * h * w);
    for _ in 0..n {
        data.extend(match kind {
            SyntheticKind::Strokes => render_strokes(h, w, rng),
            SyntheticKind::Gradients => render_gradients(h, w, rng),
            SyntheticKind::Checker => render_checker(h, w, rng),
        });
    }
    let name = format!("synthetic-{kind:?}").to_lowercase();
    Dataset::from_clean(name, ImageShape::gray(h, w), data)
}

/// `count` random crops; clean, noisy and σ travel together.
pub fn extract_patches(ds: &Dataset, patch: (usize, usize), count: usize, rng: &mut NoiseRng) -> Result<Dataset> {
    let s = ds.shape();
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 || ph > s.height || pw > s.width {
        return Err(DataError::PatchTooLarge {
            patch,
            height: s.height,
            width: s.width,
        });
    }
    if ds.is_empty() {
        return Err(DataError::Invalid("cannot crop an empty dataset".into()));
    }
    let per = s.numel();
    let mut picks = Vec::with_capacity(count);
    for _ in 0..count {
        let img = rng.below(ds.len());
        let top = rng.below(s.height - ph + 1);
        let left = rng.below(s.width - pw + 1);
        picks.push((img, top, left));
    }
    let crop = |v: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(count * s.channels * ph * pw);
        for &(img, top, left) in &picks {
            let base = &v[img * per..(img + 1) * per];
            for c in 0..s.channels {
                for i in top..top + ph {
                    let row = c * s.height * s.width + i * s.width;
                    out.extend_from_slice(&base[row + left..row + left + pw]);
                }
            }
        }
        out
    };
    Ok(Dataset {
        name: format!("{}-patches", ds.name),
        shape: ImageShape {
            channels: s.channels,
            height: ph,
            width: pw,
        },
        len: count,
        clean: ds.clean.as_deref().map(crop),
        noisy: ds.noisy.as_deref().map(crop),
        sigma: ds.sigma.as_ref().map(|sg| picks.iter().map(|p| sg[p.0]).collect()),
        labels: ds.labels.as_ref().map(|l| picks.iter().map(|p| l[p.0]).collect()),
    })
}

/// `10 log10(peak² / mse)`; identical inputs give `f64::INFINITY`.
pub fn psnr_slices(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(DataError::DimMismatch {
            expected: a.shape().to_vec(),
            found: b.shape().to_vec(),
        });
    }
    if !(peak > 0.0) {
        return Err(DataError::Invalid(format!("peak must be positive, got {peak}")));
    }
    Ok(psnr_slices(a.data(), b.data(), peak))
}

/// Mean of per-image PSNR over the leading axis.
pub fn mean_psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    psnr(a, b, peak)?;
    let n = a.shape().first().copied().unwrap_or(1).max(1);
    let per = a.numel() / n;
    let total: f64 = (0..n)
        .map(|i| psnr_slices(&a.data()[i * per..(i + 1) * per], &b.data()[i * per..(i + 1) * per], peak))
        .sum();
    Ok(total / n as f64)
}

/// Clamp to [0, 1] then round half up to a byte.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match img.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
        other => {
            return Err(DataError::DimMismatch {
                expected: vec![1, 0, 0],
                found: other.to_vec(),
            })
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Parses binary PGM (P5, maxval 255) into a `[1, H, W]` tensor.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::BadHeader("header ends early".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(DataError::BadHeader(format!("magic '{}' is not P5", fields[0])));
    }
    let num = |s: &str, what: &str| {
        s.parse::<u32>()
            .map_err(|_| DataError::BadHeader(format!("{what} '{s}' is not a number")))
    };
    let w = num(&fields[1], "width")? as usize;
    let h = num(&fields[2], "height")? as usize;
    let maxval = num(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(DataError::UnsupportedMaxval(maxval));
    }
    if w == 0 || h == 0 {
        return Err(DataError::BadHeader(format!("empty image {w}x{h}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let expected = pos + w * h;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[pos..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(data, &[1, h, w])?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_pgm(&bytes)
}

pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = encode_pgm(img)?;
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)
}

/// Record of a corrupted dataset on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub noise: NoiseSpec,
    pub source: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Paths are relative to the manifest's directory.
    pub noisy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<String>,
    /// σ in intensity units (Gaussian noise).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads the listed PGM files. Clean images are loaded only when asked
    /// for and listed for every entry.
    pub fn load_dataset(&self, dir: &Path, with_clean: bool) -> Result<Dataset> {
        let mut noisy = Vec::new();
        let mut clean = Vec::new();
        let mut shape = None;
        let all_clean = with_clean && self.entries.iter().all(|e| e.clean.is_some());
        for e in &self.entries {
            let y = read_pgm(&dir.join(&e.noisy))?;
            let s = ImageShape::gray(y.shape()[1], y.shape()[2]);
            match shape {
                None => shape = Some(s),
                Some(prev) if prev != s => {
                    return Err(DataError::DimMismatch {
                        expected: prev.dims().to_vec(),
                        found: s.dims().to_vec(),
                    })
                }
                _ => {}
            }
            noisy.extend_from_slice(y.data());
            if all_clean {
                let x = read_pgm(&dir.join(e.clean.as_deref().expect("checked above")))?;
                if x.shape() != y.shape() {
                    return Err(DataError::DimMismatch {
                        expected: y.shape().to_vec(),
                        found: x.shape().to_vec(),
                    });
                }
                clean.extend_from_slice(x.data());
            }
        }
        let shape = shape.ok_or_else(|| DataError::Invalid("manifest lists no images".into()))?;
        let sigma: Option<Vec<f64>> = self.entries.iter().map(|e| e.sigma).collect();
        if all_clean {
            Dataset::from_clean(self.source.clone(), shape, clean)?.with_noisy(noisy, sigma)
        } else {
            Dataset::from_noisy(self.source.clone(), shape, noisy)?.with_sigma(sigma)
        }
    }
}

#[cfg(test)]
mod tests;
