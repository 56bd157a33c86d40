use super::kernels::{self, Window};
use super::{numel, Result, Tensor, TensorError};

/// Stride/padding of a 2-D (transposed) convolution. `output_padding` only
/// applies to the transposed direction, where it picks between the output
/// sizes that all map back onto the same input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl Conv2dGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            output_padding: 0,
        }
    }

    pub fn conv_out(&self, size: usize, kernel: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    pub fn conv_transpose_out(&self, size: usize, kernel: usize) -> Option<usize> {
        if size == 0 || self.stride == 0 {
            return None;
        }
        ((size - 1) * self.stride + kernel + self.output_padding).checked_sub(2 * self.padding)
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    MatMul,
    Sum { axes: Vec<usize> },
    Reshape,
    Sigmoid,
    Relu,
    Conv2d(Conv2dGeometry),
    ConvTranspose2d(Conv2dGeometry),
    BatchNorm {
        mean: Vec<f64>,
        invstd: Vec<f64>,
        batch_stats: bool,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::MatMul => "matmul",
            Op::Sum { .. } => "reduce_sum",
            Op::Reshape => "reshape",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Conv2d(_) => "conv2d",
            Op::ConvTranspose2d(_) => "conv_transpose2d",
            Op::BatchNorm { .. } => "batch_norm",
        }
    }

    /// Vector-Jacobian products for each input, `None` where not needed.
    pub(crate) fn backward(
        &self,
        out: &Tensor,
        inputs: &[Tensor],
        g: &[f64],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let need = |i: usize| inputs[i].requires_grad();
        Ok(match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let sa = kernels::broadcast_strides(a.shape(), out.shape());
                let sb = kernels::broadcast_strides(b.shape(), out.shape());
                let mut ga = need(0).then(|| vec![0.0; a.numel()]);
                let mut gb = need(1).then(|| vec![0.0; b.numel()]);
                let (ad, bd) = (a.data(), b.data());
                kernels::for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                    let (da, db) = match self {
                        Op::Add => (g[o], g[o]),
                        Op::Sub => (g[o], -g[o]),
                        Op::Mul => (g[o] * bd[ib], g[o] * ad[ia]),
                        _ => (g[o] / bd[ib], -g[o] * ad[ia] / (bd[ib] * bd[ib])),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db;
                    }
                });
                vec![ga, gb]
            }
            Op::Neg => vec![Some(g.iter().map(|v| -v).collect())],
            Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Op::AddScalar | Op::Reshape => vec![Some(g.to_vec())],
            Op::MatMul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = need(0).then(|| {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, 1.0, g, false, b.data(), true, 0.0, &mut ga);
                    ga
                });
                let gb = need(1).then(|| {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, 1.0, a.data(), true, g, false, 0.0, &mut gb);
                    gb
                });
                vec![ga, gb]
            }
            Op::Sum { axes } => {
                let x = &inputs[0];
                let kept = kept_shape(x.shape(), axes);
                let s = kernels::broadcast_strides(&kept, x.shape());
                let mut gx = vec![0.0; x.numel()];
                kernels::for_each_broadcast(x.shape(), &s, &s, |i, io, _| gx[i] = g[io]);
                vec![Some(gx)]
            }
            Op::Sigmoid => {
                let y = out.data();
                vec![Some(
                    g.iter()
                        .zip(y)
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect(),
                )]
            }
            Op::Relu => {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Conv2d(geom) => conv2d_backward(*geom, inputs, out.shape(), g),
            Op::ConvTranspose2d(geom) => conv_transpose2d_backward(*geom, inputs, out.shape(), g),
            Op::BatchNorm {
                mean,
                invstd,
                batch_stats,
            } => batch_norm_backward(inputs, mean, invstd, *batch_stats, g),
        })
    }
}

fn kept_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: Op) -> Result<Tensor> {
        let name = op.name();
        let shape = kernels::broadcast_shape(self.shape(), other.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            }
        })?;
        let f: fn(f64, f64) -> f64 = match op {
            Op::Add => |a, b| a + b,
            Op::Sub => |a, b| a - b,
            Op::Mul => |a, b| a * b,
            _ => |a, b| a / b,
        };
        let (a, b) = (self.data(), other.data());
        let data = if self.shape() == other.shape() {
            a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let sa = kernels::broadcast_strides(self.shape(), &shape);
            let sb = kernels::broadcast_strides(other.shape(), &shape);
            let mut out = vec![0.0; numel(&shape)];
            kernels::for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| out[o] = f(a[ia], b[ib]));
            out
        };
        Tensor::from_op(data, shape, op, vec![self.clone(), other.clone()])
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div)
    }

    pub fn neg(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| -v).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Scale(c), vec![self.clone()])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::AddScalar, vec![self.clone()])
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(mismatch());
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, self.data(), false, other.data(), false, 0.0, &mut out);
        Tensor::from_op(out, vec![m, n], Op::MatMul, vec![self.clone(), other.clone()])
    }

    /// Sums over `axes`, removing them from the shape.
    pub fn reduce_sum(&self, axes: &[usize]) -> Result<Tensor> {
        for &axis in axes {
            if axis >= self.rank() {
                return Err(TensorError::InvalidAxis {
                    op: "reduce_sum",
                    axis,
                    rank: self.rank(),
                });
            }
        }
        let kept = kept_shape(self.shape(), axes);
        let out_shape: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let s = kernels::broadcast_strides(&kept, self.shape());
        let mut out = vec![0.0; numel(&kept)];
        let x = self.data();
        kernels::for_each_broadcast(self.shape(), &s, &s, |i, io, _| out[io] += x[i]);
        Tensor::from_op(
            out,
            out_shape,
            Op::Sum {
                axes: axes.to_vec(),
            },
            vec![self.clone()],
        )
    }

    pub fn reduce_mean(&self, axes: &[usize]) -> Result<Tensor> {
        let count: usize = axes
            .iter()
            .filter_map(|&a| self.shape().get(a))
            .product();
        self.reduce_sum(axes)?.scale(1.0 / count as f64)
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce_sum(&axes)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce_mean(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data = self
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Sigmoid, vec![self.clone()])
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Relu, vec![self.clone()])
    }

    /// `self`: `[B, Cin, H, W]`, `weight`: `[Cout, Cin, kh, kw]`, `bias`: `[Cout]`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        geom: Conv2dGeometry,
    ) -> Result<Tensor> {
        let mismatch = |rhs: &[usize]| TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: self.shape().to_vec(),
            rhs: rhs.to_vec(),
        };
        if self.rank() != 4 || weight.rank() != 4 || weight.shape()[1] != self.shape()[1] {
            return Err(mismatch(weight.shape()));
        }
        let [b, cin, h, w] = dims4(self.shape());
        let [cout, _, kh, kw] = dims4(weight.shape());
        if let Some(bias) = bias {
            if bias.shape() != [cout] {
                return Err(mismatch(bias.shape()));
            }
        }
        let (oh, ow) = match (geom.conv_out(h, kh), geom.conv_out(w, kw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(mismatch(weight.shape())),
        };
        let win = Window {
            channels: cin,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride: geom.stride,
            pad: geom.padding,
            out_h: oh,
            out_w: ow,
        };
        let (rows, ncols) = (win.col_rows(), win.col_cols());
        let mut cols = vec![0.0; rows * ncols];
        let mut out = vec![0.0; b * cout * ncols];
        for n in 0..b {
            kernels::im2col(&self.data()[n * cin * h * w..(n + 1) * cin * h * w], &win, &mut cols);
            let dst = &mut out[n * cout * ncols..(n + 1) * cout * ncols];
            kernels::gemm(cout, rows, ncols, 1.0, weight.data(), false, &cols, false, 0.0, dst);
            if let Some(bias) = bias {
                add_channel_bias(dst, bias.data(), ncols);
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        Tensor::from_op(out, vec![b, cout, oh, ow], Op::Conv2d(geom), inputs)
    }

    /// `self`: `[B, Cin, H, W]`, `weight`: `[Cin, Cout, kh, kw]`, `bias`: `[Cout]`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        geom: Conv2dGeometry,
    ) -> Result<Tensor> {
        let mismatch = |rhs: &[usize]| TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            lhs: self.shape().to_vec(),
            rhs: rhs.to_vec(),
        };
        if self.rank() != 4 || weight.rank() != 4 || weight.shape()[0] != self.shape()[1] {
            return Err(mismatch(weight.shape()));
        }
        if geom.output_padding >= geom.stride.max(1) {
            return Err(TensorError::Invalid(
                "conv_transpose2d: output_padding must be smaller than stride".into(),
            ));
        }
        let [b, cin, ih, iw] = dims4(self.shape());
        let [_, cout, kh, kw] = dims4(weight.shape());
        if let Some(bias) = bias {
            if bias.shape() != [cout] {
                return Err(mismatch(bias.shape()));
            }
        }
        let (oh, ow) = match (geom.conv_transpose_out(ih, kh), geom.conv_transpose_out(iw, kw)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => return Err(mismatch(weight.shape())),
        };
        let win = transpose_window(cout, oh, ow, kh, kw, geom, ih, iw);
        let (rows, ncols) = (win.col_rows(), win.col_cols());
        let mut cols = vec![0.0; rows * ncols];
        let mut out = vec![0.0; b * cout * oh * ow];
        for n in 0..b {
            let x = &self.data()[n * cin * ncols..(n + 1) * cin * ncols];
            kernels::gemm(rows, cin, ncols, 1.0, weight.data(), true, x, false, 0.0, &mut cols);
            let dst = &mut out[n * cout * oh * ow..(n + 1) * cout * oh * ow];
            kernels::col2im(&cols, &win, dst);
            if let Some(bias) = bias {
                add_channel_bias(dst, bias.data(), oh * ow);
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        Tensor::from_op(out, vec![b, cout, oh, ow], Op::ConvTranspose2d(geom), inputs)
    }

    /// Per-channel normalization of `[B, C, H, W]`.
    ///
    /// With `stats = None` the batch statistics are used and returned as
    /// `(mean, biased variance)`; otherwise the given statistics are treated
    /// as constants.
    pub fn batch_norm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        if self.rank() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let [b, c, h, w] = dims4(self.shape());
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let hw = h * w;
        let x = self.data();
        let (mean, var) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let count = (b * hw) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for n in 0..b {
                        s += x[(n * c + ch) * hw..(n * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / count;
                    let mut ss = 0.0;
                    for n in 0..b {
                        ss += x[(n * c + ch) * hw..(n * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / count;
                }
                (mean, var)
            }
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (gamma.data(), beta.data());
        let mut out = vec![0.0; x.len()];
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * hw;
                for i in off..off + hw {
                    out[i] = (x[i] - mean[ch]) * invstd[ch] * gd[ch] + bd[ch];
                }
            }
        }
        let op = Op::BatchNorm {
            mean: mean.clone(),
            invstd,
            batch_stats: stats.is_none(),
        };
        let t = Tensor::from_op(
            out,
            self.shape().to_vec(),
            op,
            vec![self.clone(), gamma.clone(), beta.clone()],
        )?;
        Ok((t, mean, var))
    }
}

fn dims4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

fn add_channel_bias(dst: &mut [f64], bias: &[f64], plane: usize) {
    for (ch, bv) in bias.iter().enumerate() {
        dst[ch * plane..(ch + 1) * plane]
            .iter_mut()
            .for_each(|v| *v += bv);
    }
}

fn channel_sums(g: &[f64], b: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for n in 0..b {
        for (ch, acc) in s.iter_mut().enumerate() {
            *acc += g[(n * c + ch) * plane..(n * c + ch + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }
    s
}

/// The transposed convolution scatters onto the output through the same
/// window a forward convolution of the output would gather from.
#[allow(clippy::too_many_arguments)]
fn transpose_window(
    cout: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    geom: Conv2dGeometry,
    ih: usize,
    iw: usize,
) -> Window {
    Window {
        channels: cout,
        height: oh,
        width: ow,
        kernel_h: kh,
        kernel_w: kw,
        stride: geom.stride,
        pad: geom.padding,
        out_h: ih,
        out_w: iw,
    }
}

fn conv2d_backward(
    geom: Conv2dGeometry,
    inputs: &[Tensor],
    out_shape: &[usize],
    g: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let (x, weight) = (&inputs[0], &inputs[1]);
    let [b, cin, h, w] = dims4(x.shape());
    let [cout, _, kh, kw] = dims4(weight.shape());
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let win = Window {
        channels: cin,
        height: h,
        width: w,
        kernel_h: kh,
        kernel_w: kw,
        stride: geom.stride,
        pad: geom.padding,
        out_h: oh,
        out_w: ow,
    };
    let (rows, ncols) = (win.col_rows(), win.col_cols());
    let mut gx = x.requires_grad().then(|| vec![0.0; x.numel()]);
    let mut gw = weight.requires_grad().then(|| vec![0.0; weight.numel()]);
    let mut cols = vec![0.0; rows * ncols];
    for n in 0..b {
        let gn = &g[n * cout * ncols..(n + 1) * cout * ncols];
        if let Some(gw) = gw.as_mut() {
            kernels::im2col(&x.data()[n * cin * h * w..(n + 1) * cin * h * w], &win, &mut cols);
            kernels::gemm(cout, ncols, rows, 1.0, gn, false, &cols, true, 1.0, gw);
        }
        if let Some(gx) = gx.as_mut() {
            kernels::gemm(rows, cout, ncols, 1.0, weight.data(), true, gn, false, 0.0, &mut cols);
            kernels::col2im(&cols, &win, &mut gx[n * cin * h * w..(n + 1) * cin * h * w]);
        }
    }
    let mut grads = vec![gx, gw];
    if let Some(bias) = inputs.get(2) {
        grads.push(bias.requires_grad().then(|| channel_sums(g, b, cout, ncols)));
    }
    grads
}

fn conv_transpose2d_backward(
    geom: Conv2dGeometry,
    inputs: &[Tensor],
    out_shape: &[usize],
    g: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let (x, weight) = (&inputs[0], &inputs[1]);
    let [b, cin, ih, iw] = dims4(x.shape());
    let [_, cout, kh, kw] = dims4(weight.shape());
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let win = transpose_window(cout, oh, ow, kh, kw, geom, ih, iw);
    let (rows, ncols) = (win.col_rows(), win.col_cols());
    let mut gx = x.requires_grad().then(|| vec![0.0; x.numel()]);
    let mut gw = weight.requires_grad().then(|| vec![0.0; weight.numel()]);
    let mut gcols = vec![0.0; rows * ncols];
    for n in 0..b {
        let gn = &g[n * cout * oh * ow..(n + 1) * cout * oh * ow];
        kernels::im2col(gn, &win, &mut gcols);
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[n * cin * ncols..(n + 1) * cin * ncols];
            kernels::gemm(cin, rows, ncols, 1.0, weight.data(), false, &gcols, false, 0.0, dst);
        }
        if let Some(gw) = gw.as_mut() {
            let xn = &x.data()[n * cin * ncols..(n + 1) * cin * ncols];
            kernels::gemm(cin, ncols, rows, 1.0, xn, false, &gcols, true, 1.0, gw);
        }
    }
    let mut grads = vec![gx, gw];
    if let Some(bias) = inputs.get(2) {
        grads.push(bias.requires_grad().then(|| channel_sums(g, b, cout, oh * ow)));
    }
    grads
}

fn batch_norm_backward(
    inputs: &[Tensor],
    mean: &[f64],
    invstd: &[f64],
    batch_stats: bool,
    g: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let (x, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
    let [b, c, h, w] = dims4(x.shape());
    let hw = h * w;
    let count = (b * hw) as f64;
    let xd = x.data();
    let gd = gamma.data();
    // Per-channel sums of g and g * xhat.
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * hw;
            for i in off..off + hw {
                let xhat = (xd[i] - mean[ch]) * invstd[ch];
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * xhat;
            }
        }
    }
    let gx = x.requires_grad().then(|| {
        let mut gx = vec![0.0; xd.len()];
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * hw;
                let k = gd[ch] * invstd[ch];
                for i in off..off + hw {
                    gx[i] = if batch_stats {
                        let xhat = (xd[i] - mean[ch]) * invstd[ch];
                        k * (g[i] - sum_g[ch] / count - xhat * sum_gx[ch] / count)
                    } else {
                        k * g[i]
                    };
                }
            }
        }
        gx
    });
    vec![
        gx,
        gamma.requires_grad().then_some(sum_gx),
        beta.requires_grad().then_some(sum_g),
    ]
}
