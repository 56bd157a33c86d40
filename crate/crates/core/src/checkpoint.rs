//! Binary checkpoint files.
//!
//! Layout (little-endian): the magic bytes `SURE\0NET1`, a `u64` header
//! length, a JSON header, then every tensor listed in the header as raw
//! `f64` values in header order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Architecture, Denoiser, LayerSpec, MaskPolicy, NnError};
use crate::train::{OptimizerKind, OptimizerState};

pub const MAGIC: &[u8; 9] = b"SURE\0NET1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("architecture mismatch: checkpoint holds {found:?}, network is {expected:?}")]
    ArchitectureMismatch {
        expected: Architecture,
        found: Architecture,
    },
    #[error(transparent)]
    Denoiser(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    moments: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    architecture: Architecture,
    layers: Vec<LayerSpec>,
    params: Vec<NamedTensor>,
    trainable: Vec<bool>,
    buffers: Vec<NamedTensor>,
    optimizer: Option<OptimizerHeader>,
    seed: u64,
    epoch: usize,
    dtype: String,
}

/// Network parameters, batch-norm statistics and optional optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<NamedTensor>,
    pub trainable: Vec<bool>,
    pub buffers: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerState>,
    pub seed: u64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn from_denoiser(d: &Denoiser, optimizer: Option<&OptimizerState>, seed: u64, epoch: usize) -> Self {
        Self {
            architecture: *d.architecture(),
            layers: d.layer_specs(),
            params: d
                .params()
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.to_vec(),
                })
                .collect(),
            trainable: d.param_mask(),
            buffers: d
                .buffers()
                .into_iter()
                .map(|(name, v)| NamedTensor {
                    name,
                    shape: vec![v.len()],
                    data: v.to_vec(),
                })
                .collect(),
            optimizer: optimizer.cloned(),
            seed,
            epoch,
        }
    }

    /// Rebuilds the network (parameters, statistics and mask flags).
    pub fn to_denoiser(&self) -> Result<Denoiser> {
        let mut d = Denoiser::build(self.architecture, 0)?;
        self.load_into(&mut d)?;
        Ok(d)
    }

    /// Copies the stored state into an existing network of the same architecture.
    pub fn load_into(&self, d: &mut Denoiser) -> Result<()> {
        if *d.architecture() != self.architecture {
            return Err(CheckpointError::ArchitectureMismatch {
                expected: *d.architecture(),
                found: self.architecture,
            });
        }
        let mut params = d.params_mut();
        if params.len() != self.params.len() || self.trainable.len() != self.params.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} stored tensors for {} parameters",
                self.params.len(),
                params.len()
            )));
        }
        for (p, stored) in params.iter_mut().zip(&self.params) {
            if p.name != stored.name || p.value.shape() != stored.shape.as_slice() {
                return Err(CheckpointError::Corrupt(format!(
                    "parameter {} {:?} does not match stored {} {:?}",
                    p.name,
                    p.value.shape(),
                    stored.name,
                    stored.shape
                )));
            }
            p.set_data(stored.data.clone());
        }
        let frozen_bn = params
            .iter()
            .zip(&self.trainable)
            .any(|(p, &t)| p.is_batch_norm() && !t);
        drop(params);
        d.apply_param_mask(if frozen_bn {
            MaskPolicy::FreezeBatchNorm
        } else {
            MaskPolicy::AllTrainable
        });
        for (p, &t) in d.params_mut().into_iter().zip(&self.trainable) {
            p.trainable = t;
        }
        let mut buffers = d.buffers_mut();
        if buffers.len() != self.buffers.len() {
            return Err(CheckpointError::Corrupt("batch-norm statistics count differs".into()));
        }
        for ((name, buf), stored) in buffers.iter_mut().zip(&self.buffers) {
            if *name != stored.name || buf.len() != stored.data.len() {
                return Err(CheckpointError::Corrupt(format!("buffer {name} does not match {}", stored.name)));
            }
            buf.copy_from_slice(&stored.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let moments = self
            .optimizer
            .as_ref()
            .is_some_and(|o| !o.first_moment.is_empty());
        let header = Header {
            version: FORMAT_VERSION,
            architecture: self.architecture,
            layers: self.layers.clone(),
            params: self.params.clone(),
            trainable: self.trainable.clone(),
            buffers: self.buffers.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                kind: o.kind,
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                step: o.step,
                moments,
            }),
            seed: self.seed,
            epoch: self.epoch,
            dtype: "f64".into(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * self.payload_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        self.params.iter().for_each(|t| put(&t.data));
        self.buffers.iter().for_each(|t| put(&t.data));
        if let Some(o) = self.optimizer.as_ref().filter(|_| moments) {
            o.first_moment.iter().for_each(|m| put(m));
            o.second_moment.iter().for_each(|m| put(m));
        }
        out
    }

    fn payload_len(&self) -> usize {
        let n: usize = self.params.iter().chain(&self.buffers).map(|t| t.data.len()).sum();
        let m: usize = self
            .optimizer
            .as_ref()
            .map_or(0, |o| o.first_moment.iter().chain(&o.second_moment).map(Vec::len).sum());
        n + m
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::Corrupt("missing magic bytes".into()));
        }
        let mut pos = MAGIC.len();
        let len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes")) as usize;
        pos += 8;
        let json = bytes
            .get(pos..pos.saturating_add(len))
            .ok_or_else(|| CheckpointError::Corrupt("header truncated".into()))?;
        // Version first, so newer files fail with a clear message.
        let version = serde_json::from_slice::<serde_json::Value>(json)
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CheckpointError::Corrupt("header has no version".into()))? as u32;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let mut header: Header =
            serde_json::from_slice(json).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        pos += len;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let end = pos + 8 * n;
            let raw = bytes
                .get(pos..end)
                .ok_or_else(|| CheckpointError::Corrupt("payload truncated".into()))?;
            pos = end;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        for t in header.params.iter_mut().chain(header.buffers.iter_mut()) {
            t.data = take(t.shape.iter().product())?;
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let sizes: Vec<usize> = header.params.iter().map(|t| t.data.len()).collect();
                let (first, second) = if o.moments {
                    let a = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                    let b = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                    (a, b)
                } else {
                    (Vec::new(), Vec::new())
                };
                Some(OptimizerState {
                    kind: o.kind,
                    lr: o.lr,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    weight_decay: o.weight_decay,
                    step: o.step,
                    first_moment: first,
                    second_moment: second,
                })
            }
            None => None,
        };
        if pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - pos
            )));
        }
        Ok(Self {
            architecture: header.architecture,
            layers: header.layers,
            params: header.params,
            trainable: header.trainable,
            buffers: header.buffers,
            optimizer,
            seed: header.seed,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
