//! Differentiable denoisers `h(y; θ)`: a stacked convolutional denoising
//! autoencoder with sigmoid activations and a residual CNN that predicts the
//! noise and subtracts it from its input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{NoiseRng, Stream};
use crate::tensor::{no_grad, Conv2dGeometry, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("expected input [B, {channels}, H, W], got {got:?}")]
    InputShape { channels: usize, got: Vec<usize> },
    #[error("{arch} only accepts {expected}x{expected} inputs, got {h}x{w}")]
    UnsupportedSize {
        arch: &'static str,
        expected: usize,
        h: usize,
        w: usize,
    },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Batch-norm numerics.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Spatial size the autoencoder is built for.
pub const SDA_SIZE: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    ConvTranspose2d,
    Sigmoid,
    Relu,
    BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub bias: bool,
}

impl LayerSpec {
    fn conv(kind: LayerKind, cin: usize, cout: usize, stride: usize, output_padding: usize, bias: bool) -> Self {
        Self {
            kind,
            in_channels: cin,
            out_channels: cout,
            kernel: [3, 3],
            stride,
            padding: 1,
            output_padding,
            bias,
        }
    }

    fn pointwise(kind: LayerKind, channels: usize) -> Self {
        Self {
            kind,
            in_channels: channels,
            out_channels: channels,
            kernel: [1, 1],
            stride: 1,
            padding: 0,
            output_padding: 0,
            bias: false,
        }
    }

    fn geometry(&self) -> Conv2dGeometry {
        Conv2dGeometry {
            stride: self.stride,
            padding: self.padding,
            output_padding: self.output_padding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    fn new(name: String, role: ParamRole, data: Vec<f64>, shape: &[usize]) -> Self {
        Self {
            name,
            role,
            value: Tensor::parameter(data, shape).expect("parameter length matches shape"),
            trainable: true,
        }
    }

    /// Swaps in new values; the fresh leaf starts without a gradient.
    pub fn set_data(&mut self, data: Vec<f64>) {
        self.value = Tensor::parameter(data, self.value.shape()).expect("same length");
    }

    pub fn is_batch_norm(&self) -> bool {
        matches!(self.role, ParamRole::BnScale | ParamRole::BnShift)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d {
        spec: LayerSpec,
        weight: Param,
        bias: Option<Param>,
    },
    ConvTranspose2d {
        spec: LayerSpec,
        weight: Param,
        bias: Option<Param>,
    },
    Sigmoid(LayerSpec),
    Relu(LayerSpec),
    BatchNorm {
        spec: LayerSpec,
        gamma: Param,
        beta: Param,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        /// Frozen layers normalize with running statistics and never update them.
        frozen: bool,
    },
}

impl Layer {
    pub fn spec(&self) -> &LayerSpec {
        match self {
            Layer::Conv2d { spec, .. }
            | Layer::ConvTranspose2d { spec, .. }
            | Layer::Sigmoid(spec)
            | Layer::Relu(spec)
            | Layer::BatchNorm { spec, .. } => spec,
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::ConvTranspose2d { weight, bias, .. } => {
                std::iter::once(weight).chain(bias.as_ref()).collect()
            }
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::ConvTranspose2d { weight, bias, .. } => {
                std::iter::once(weight).chain(bias.as_mut()).collect()
            }
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode, track_stats: bool) -> Result<Tensor> {
        Ok(match self {
            Layer::Conv2d { spec, weight, bias } => {
                x.conv2d(&weight.value, bias.as_ref().map(|b| &b.value), spec.geometry())?
            }
            Layer::ConvTranspose2d { spec, weight, bias } => x.conv_transpose2d(
                &weight.value,
                bias.as_ref().map(|b| &b.value),
                spec.geometry(),
            )?,
            Layer::Sigmoid(_) => x.sigmoid()?,
            Layer::Relu(_) => x.relu()?,
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                frozen,
                ..
            } => {
                if mode == Mode::Eval || *frozen {
                    let stats = Some((running_mean.as_slice(), running_var.as_slice()));
                    x.batch_norm(&gamma.value, &beta.value, stats, BN_EPS)?.0
                } else {
                    let (out, mean, var) = x.batch_norm(&gamma.value, &beta.value, None, BN_EPS)?;
                    if track_stats {
                        let s = x.shape();
                        let count = (s[0] * s[2] * s[3]) as f64;
                        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                        for c in 0..mean.len() {
                            running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * mean[c];
                            running_var[c] =
                                (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * var[c] * unbias;
                        }
                    }
                    out
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Sda {
        in_channels: usize,
    },
    DncnnLite {
        in_channels: usize,
        depth: usize,
        channels: usize,
    },
}

impl Architecture {
    pub fn tag(&self) -> ArchTag {
        match self {
            Architecture::Sda { .. } => ArchTag::Sda,
            Architecture::DncnnLite { .. } => ArchTag::DncnnLite,
        }
    }

    pub fn in_channels(&self) -> usize {
        match *self {
            Architecture::Sda { in_channels } | Architecture::DncnnLite { in_channels, .. } => in_channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchTag {
    Sda,
    DncnnLite,
}

impl ArchTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchTag::Sda => "sda",
            ArchTag::DncnnLite => "dncnn_lite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    AllTrainable,
    FreezeBatchNorm,
}

/// Anything usable as `h(y)` by the risk estimators.
pub trait Denoise {
    fn denoise(&mut self, y: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Forward on a perturbed copy of the batch. Must not change any state
    /// (batch-norm running statistics in particular).
    fn denoise_probe(&mut self, y: &Tensor, mode: Mode) -> Result<Tensor> {
        self.denoise(y, mode)
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    arch: Architecture,
    layers: Vec<Layer>,
    residual: bool,
}

/// Uniform(-bound, bound) with bound = 1/sqrt(fan_in), i.e. Kaiming-uniform
/// with negative slope sqrt(5).
fn kaiming_uniform(n: usize, fan_in: usize, rng: &mut NoiseRng) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
}

fn conv_layer(spec: LayerSpec, index: usize, zero: bool, rng: &mut NoiseRng) -> Layer {
    let [kh, kw] = spec.kernel;
    let transposed = spec.kind == LayerKind::ConvTranspose2d;
    let shape = if transposed {
        [spec.in_channels, spec.out_channels, kh, kw]
    } else {
        [spec.out_channels, spec.in_channels, kh, kw]
    };
    // Fan-in is taken from the weight's second dimension for both kinds.
    let fan_in = shape[1] * kh * kw;
    let n: usize = shape.iter().product();
    let init = |n: usize, rng: &mut NoiseRng| {
        if zero {
            vec![0.0; n]
        } else {
            kaiming_uniform(n, fan_in, rng)
        }
    };
    let weight = Param::new(format!("layer{index}.weight"), ParamRole::Weight, init(n, rng), &shape);
    let bias = spec.bias.then(|| {
        Param::new(
            format!("layer{index}.bias"),
            ParamRole::Bias,
            init(spec.out_channels, rng),
            &[spec.out_channels],
        )
    });
    if transposed {
        Layer::ConvTranspose2d { spec, weight, bias }
    } else {
        Layer::Conv2d { spec, weight, bias }
    }
}

fn batch_norm_layer(channels: usize, index: usize) -> Layer {
    Layer::BatchNorm {
        spec: LayerSpec::pointwise(LayerKind::BatchNorm, channels),
        gamma: Param::new(format!("layer{index}.gamma"), ParamRole::BnScale, vec![1.0; channels], &[channels]),
        beta: Param::new(format!("layer{index}.beta"), ParamRole::BnShift, vec![0.0; channels], &[channels]),
        running_mean: vec![0.0; channels],
        running_var: vec![1.0; channels],
        frozen: false,
    }
}

/// Encoder widths of the autoencoder (`in -> 32 -> 64`), mirrored by the decoder.
pub const SDA_WIDTHS: [usize; 2] = [32, 64];

pub fn build_sda(in_channels: usize, seed: u64) -> Result<Denoiser> {
    Denoiser::build(Architecture::Sda { in_channels }, seed)
}

pub fn build_dncnn_lite(depth: usize, channels: usize, seed: u64) -> Result<Denoiser> {
    Denoiser::build(
        Architecture::DncnnLite {
            in_channels: 1,
            depth,
            channels,
        },
        seed,
    )
}

impl Denoiser {
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = NoiseRng::new(seed, Stream::Init);
        let specs = Self::layer_plan(&arch)?;
        let last_conv = specs
            .iter()
            .rposition(|s| matches!(s.kind, LayerKind::Conv2d | LayerKind::ConvTranspose2d));
        let residual = matches!(arch, Architecture::DncnnLite { .. });
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, spec)| match spec.kind {
                LayerKind::Conv2d | LayerKind::ConvTranspose2d => {
                    // The residual branch starts at zero so h(y) = y initially.
                    conv_layer(spec, i, residual && Some(i) == last_conv, &mut rng)
                }
                LayerKind::BatchNorm => batch_norm_layer(spec.in_channels, i),
                LayerKind::Sigmoid => Layer::Sigmoid(spec),
                LayerKind::Relu => Layer::Relu(spec),
            })
            .collect();
        Ok(Self {
            arch,
            layers,
            residual,
        })
    }

    /// The ordered layer list an architecture expands to.
    pub fn layer_plan(arch: &Architecture) -> Result<Vec<LayerSpec>> {
        use LayerKind::*;
        match *arch {
            Architecture::Sda { in_channels } => {
                if in_channels == 0 {
                    return Err(NnError::InvalidArchitecture("in_channels must be >= 1".into()));
                }
                let [w1, w2] = SDA_WIDTHS;
                Ok(vec![
                    LayerSpec::conv(Conv2d, in_channels, w1, 2, 0, true),
                    LayerSpec::pointwise(Sigmoid, w1),
                    LayerSpec::conv(Conv2d, w1, w2, 2, 0, true),
                    LayerSpec::pointwise(Sigmoid, w2),
                    LayerSpec::conv(ConvTranspose2d, w2, w1, 2, 1, true),
                    LayerSpec::pointwise(Sigmoid, w1),
                    LayerSpec::conv(ConvTranspose2d, w1, in_channels, 2, 1, true),
                    LayerSpec::pointwise(Sigmoid, in_channels),
                ])
            }
            Architecture::DncnnLite {
                in_channels,
                depth,
                channels,
            } => {
                if depth < 3 || channels == 0 || in_channels == 0 {
                    return Err(NnError::InvalidArchitecture(format!(
                        "dncnn_lite needs depth >= 3 and positive widths, got depth {depth}, channels {channels}"
                    )));
                }
                let mut plan = vec![
                    LayerSpec::conv(Conv2d, in_channels, channels, 1, 0, true),
                    LayerSpec::pointwise(Relu, channels),
                ];
                for _ in 0..depth - 2 {
                    plan.push(LayerSpec::conv(Conv2d, channels, channels, 1, 0, false));
                    plan.push(LayerSpec::pointwise(BatchNorm, channels));
                    plan.push(LayerSpec::pointwise(Relu, channels));
                }
                plan.push(LayerSpec::conv(Conv2d, channels, in_channels, 1, 0, true));
                Ok(plan)
            }
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn tag(&self) -> ArchTag {
        self.arch.tag()
    }

    pub fn is_residual(&self) -> bool {
        self.residual
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec().clone()).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    pub fn param_mask(&self) -> Vec<bool> {
        self.params().iter().map(|p| p.trainable).collect()
    }

    pub fn apply_param_mask(&mut self, policy: MaskPolicy) {
        let freeze_bn = policy == MaskPolicy::FreezeBatchNorm;
        for layer in &mut self.layers {
            if let Layer::BatchNorm { frozen, .. } = layer {
                *frozen = freeze_bn;
            }
        }
        for p in self.params_mut() {
            p.trainable = !(freeze_bn && p.is_batch_norm());
        }
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.value.zero_grad();
        }
    }

    /// Running statistics of every batch-norm layer as `(name, values)`.
    pub fn buffers(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = layer
            {
                out.push((format!("layer{i}.running_mean"), running_mean.as_slice()));
                out.push((format!("layer{i}.running_var"), running_var.as_slice()));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = layer
            {
                out.push((format!("layer{i}.running_mean"), running_mean));
                out.push((format!("layer{i}.running_var"), running_var));
            }
        }
        out
    }

    fn check_input(&self, y: &Tensor) -> Result<()> {
        let c = self.arch.in_channels();
        let s = y.shape();
        if s.len() != 4 || s[1] != c || s[0] == 0 {
            return Err(NnError::InputShape {
                channels: c,
                got: s.to_vec(),
            });
        }
        if self.tag() == ArchTag::Sda && (s[2] != SDA_SIZE || s[3] != SDA_SIZE) {
            return Err(NnError::UnsupportedSize {
                arch: "sda",
                expected: SDA_SIZE,
                h: s[2],
                w: s[3],
            });
        }
        Ok(())
    }

    fn run_layers(&mut self, y: &Tensor, mode: Mode, track_stats: bool) -> Result<Tensor> {
        self.check_input(y)?;
        let mut x = y.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, mode, track_stats)?;
        }
        Ok(x)
    }

    /// `CNN_θ(y)` of the residual form; the plain network output otherwise.
    pub fn network_output(&mut self, y: &Tensor, mode: Mode) -> Result<Tensor> {
        self.run_layers(y, mode, false)
    }

    fn forward_impl(&mut self, y: &Tensor, mode: Mode, track_stats: bool) -> Result<Tensor> {
        let out = self.run_layers(y, mode, track_stats)?;
        if self.residual {
            Ok(y.sub(&out)?)
        } else {
            Ok(out)
        }
    }

    pub fn forward(&mut self, y: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_impl(y, mode, true)
    }

    /// Eval-mode forward without recording a graph.
    pub fn predict(&mut self, y: &Tensor) -> Result<Tensor> {
        no_grad(|| self.forward_impl(y, Mode::Eval, false))
    }
}

impl Denoise for Denoiser {
    fn denoise(&mut self, y: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_impl(y, mode, true)
    }

    fn denoise_probe(&mut self, y: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_impl(y, mode, false)
    }
}

/// `h(y) = y`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDenoiser;

impl Denoise for IdentityDenoiser {
    fn denoise(&mut self, y: &Tensor, _mode: Mode) -> Result<Tensor> {
        Ok(y.clone())
    }
}

/// `h(y) = c` for a fixed per-sample image `c`.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser {
    pub value: Tensor,
}

impl Denoise for ConstantDenoiser {
    fn denoise(&mut self, y: &Tensor, _mode: Mode) -> Result<Tensor> {
        let per_sample: usize = y.shape()[1..].iter().product();
        if self.value.numel() != per_sample {
            return Err(NnError::InputShape {
                channels: 0,
                got: y.shape().to_vec(),
            });
        }
        let data: Vec<f64> = (0..y.shape()[0])
            .flat_map(|_| self.value.data().iter().copied())
            .collect();
        Ok(Tensor::new(data, y.shape())?)
    }
}

/// `h(y) = A y` applied to each flattened sample.
#[derive(Debug, Clone)]
pub struct LinearDenoiser {
    pub matrix: Tensor,
}

impl LinearDenoiser {
    pub fn new(matrix: Tensor) -> Self {
        Self { matrix }
    }

    pub fn trace(&self) -> f64 {
        let k = self.matrix.shape()[0];
        (0..k).map(|i| self.matrix.data()[i * k + i]).sum()
    }
}

impl Denoise for LinearDenoiser {
    fn denoise(&mut self, y: &Tensor, _mode: Mode) -> Result<Tensor> {
        let m = y.shape()[0];
        let k: usize = y.shape()[1..].iter().product();
        let flat = y.reshape(&[m, k])?;
        // (A y_j)^T = y_j^T A^T, batched as Y A^T.
        let at = {
            let a = self.matrix.data();
            let mut t = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    t[j * k + i] = a[i * k + j];
                }
            }
            Tensor::new(t, &[k, k])?
        };
        Ok(flat.matmul(&at)?.reshape(y.shape())?)
    }
}
