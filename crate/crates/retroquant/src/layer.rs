//! Layer definitions with forward and backward kernels.
//!
//! The supported set is a fixed, small family of sequential layers:
//! Conv2d (stride + zero padding), Linear, BatchNorm, ReLU, MaxPool,
//! AvgPool, Flatten and Softmax. Every layer has an input-gradient rule;
//! Conv2d, Linear and BatchNorm additionally have parameter gradients.
//!
//! All kernels are pure with respect to the layer: concurrent calls on
//! distinct inputs are safe. Dot products and reductions accumulate in f64
//! and store f32.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-norm execution mode. Inference reads stored running statistics;
/// training normalizes with batch statistics (the mini trainer is the only
/// caller of the training mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Inference,
    Training,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    Linear,
    BatchNorm,
    Relu,
    MaxPool,
    AvgPool,
    Flatten,
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Linear => "linear",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "max_pool",
            LayerKind::AvgPool => "avg_pool",
            LayerKind::Flatten => "flatten",
            LayerKind::Softmax => "softmax",
        }
    }
}

/// One layer of a sequential model: kind, parameter tensors and
/// hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// 2-D convolution over `[n, c_in, h, w]`; weight `[c_out, c_in, kh, kw]`.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    /// Fully connected layer over `[n, f_in]`; weight `[f_out, f_in]`.
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    /// Per-channel batch normalization over channel axis 1.
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        eps: f32,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    AvgPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    Softmax,
}

/// Result of a training-mode forward pass: the per-channel batch statistics
/// a batch-norm layer observed, for the caller to fold into running stats.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::Linear { .. } => LayerKind::Linear,
            LayerSpec::BatchNorm { .. } => LayerKind::BatchNorm,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::MaxPool { .. } => LayerKind::MaxPool,
            LayerSpec::AvgPool { .. } => LayerKind::AvgPool,
            LayerSpec::Flatten => LayerKind::Flatten,
            LayerSpec::Softmax => LayerKind::Softmax,
        }
    }

    /// Layers whose weights are subject to quantization.
    pub fn is_quantizable(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. })
    }

    /// The weight tensor of a quantizable layer.
    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            LayerSpec::Conv2d { weight, .. } | LayerSpec::Linear { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            LayerSpec::Conv2d { weight, .. } | LayerSpec::Linear { weight, .. } => Some(weight),
            _ => None,
        }
    }

    /// Trainable parameter tensors, in a fixed per-layer order.
    pub fn trainable(&self) -> Vec<&Tensor> {
        match self {
            LayerSpec::Conv2d { weight, bias, .. } => vec![weight, bias],
            LayerSpec::Linear { weight, bias } => vec![weight, bias],
            LayerSpec::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => vec![],
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerSpec::Conv2d { weight, bias, .. } => vec![weight, bias],
            LayerSpec::Linear { weight, bias } => vec![weight, bias],
            LayerSpec::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => vec![],
        }
    }

    /// All parameter tensors in serialization order.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerSpec::Conv2d { weight, bias, .. } => vec![weight, bias],
            LayerSpec::Linear { weight, bias } => vec![weight, bias],
            LayerSpec::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => vec![gamma, beta, running_mean, running_var],
            _ => vec![],
        }
    }

    /// Structural validation of parameters and hyperparameters.
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv2d {
                weight,
                bias,
                stride,
                ..
            } => {
                if weight.rank() != 4 {
                    return Err(Error::InvalidLayerParam(format!(
                        "conv2d weight must be rank 4, got {:?}",
                        weight.shape()
                    )));
                }
                if bias.rank() != 1 || bias.len() != weight.shape()[0] {
                    return Err(Error::InvalidLayerParam(
                        "conv2d bias must match output channels".into(),
                    ));
                }
                if *stride == 0 {
                    return Err(Error::InvalidLayerParam("conv2d stride must be > 0".into()));
                }
            }
            LayerSpec::Linear { weight, bias } => {
                if weight.rank() != 2 {
                    return Err(Error::InvalidLayerParam(format!(
                        "linear weight must be rank 2, got {:?}",
                        weight.shape()
                    )));
                }
                if bias.rank() != 1 || bias.len() != weight.shape()[0] {
                    return Err(Error::InvalidLayerParam(
                        "linear bias must match output features".into(),
                    ));
                }
            }
            LayerSpec::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            } => {
                let c = gamma.len();
                if beta.len() != c || running_mean.len() != c || running_var.len() != c {
                    return Err(Error::InvalidLayerParam(
                        "batch_norm parameter vectors must have equal length".into(),
                    ));
                }
                if running_var.data().iter().any(|&v| v < 0.0) {
                    return Err(Error::InvalidLayerParam(
                        "batch_norm running_var must be non-negative".into(),
                    ));
                }
                if *eps <= 0.0 {
                    return Err(Error::InvalidLayerParam(
                        "batch_norm eps must be > 0".into(),
                    ));
                }
            }
            LayerSpec::MaxPool { size, stride } | LayerSpec::AvgPool { size, stride } => {
                if *size == 0 || *stride == 0 {
                    return Err(Error::InvalidLayerParam(
                        "pool size and stride must be > 0".into(),
                    ));
                }
            }
            LayerSpec::Relu | LayerSpec::Flatten | LayerSpec::Softmax => {}
        }
        Ok(())
    }

    /// Output shape for a given input shape, checking compatibility.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        match self {
            LayerSpec::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                if input.len() != 4 {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d expects rank-4 input, got {input:?}"
                    )));
                }
                let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
                let ws = weight.shape();
                if c != ws[1] {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d input channels {} vs weight {}",
                        c, ws[1]
                    )));
                }
                let (kh, kw) = (ws[2], ws[3]);
                let ph = h + 2 * padding;
                let pw = w + 2 * padding;
                if kh > ph || kw > pw {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"
                    )));
                }
                Ok(vec![
                    n,
                    ws[0],
                    (ph - kh) / stride + 1,
                    (pw - kw) / stride + 1,
                ])
            }
            LayerSpec::Linear { weight, .. } => {
                if input.len() != 2 {
                    return Err(Error::ShapeMismatch(format!(
                        "linear expects rank-2 input, got {input:?}"
                    )));
                }
                if input[1] != weight.shape()[1] {
                    return Err(Error::ShapeMismatch(format!(
                        "linear input features {} vs weight {}",
                        input[1],
                        weight.shape()[1]
                    )));
                }
                Ok(vec![input[0], weight.shape()[0]])
            }
            LayerSpec::BatchNorm { gamma, .. } => {
                if input.len() < 2 || input[1] != gamma.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "batch_norm expects channel axis 1 of size {}, got {input:?}",
                        gamma.len()
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool { size, stride } | LayerSpec::AvgPool { size, stride } => {
                if input.len() != 4 {
                    return Err(Error::ShapeMismatch(format!(
                        "pool expects rank-4 input, got {input:?}"
                    )));
                }
                if *size > input[2] || *size > input[3] {
                    return Err(Error::ShapeMismatch(format!(
                        "pool window {size} larger than input {}x{}",
                        input[2], input[3]
                    )));
                }
                Ok(vec![
                    input[0],
                    input[1],
                    (input[2] - size) / stride + 1,
                    (input[3] - size) / stride + 1,
                ])
            }
            LayerSpec::Flatten => {
                if input.len() < 2 {
                    return Err(Error::ShapeMismatch(
                        "flatten expects rank >= 2 input".into(),
                    ));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 2 {
                    return Err(Error::ShapeMismatch(format!(
                        "softmax expects rank-2 input, got {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward_impl(input, BnMode::Inference)?.0)
    }

    /// Training-mode forward pass; batch-norm layers return the batch
    /// statistics they normalized with.
    pub fn forward_train(&self, input: &Tensor) -> Result<(Tensor, Option<BatchStats>)> {
        self.forward_impl(input, BnMode::Training)
    }

    fn forward_impl(&self, input: &Tensor, mode: BnMode) -> Result<(Tensor, Option<BatchStats>)> {
        let out_shape = self.output_shape(input.shape())?;
        let out = match self {
            LayerSpec::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => conv2d_forward(input, weight, bias, *stride, *padding, &out_shape),
            LayerSpec::Linear { weight, bias } => linear_forward(input, weight, bias, &out_shape),
            LayerSpec::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            } => {
                return batch_norm_forward(
                    input,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    *eps,
                    mode,
                );
            }
            LayerSpec::Relu => input.map(|x| if x > 0.0 { x } else { 0.0 }),
            LayerSpec::MaxPool { size, stride } => {
                pool_forward(input, *size, *stride, &out_shape, true)
            }
            LayerSpec::AvgPool { size, stride } => {
                pool_forward(input, *size, *stride, &out_shape, false)
            }
            LayerSpec::Flatten => input.reshaped(out_shape)?,
            LayerSpec::Softmax => softmax_forward(input),
        };
        Ok((out, None))
    }

    /// Backward pass: gradient of a scalar loss with respect to the layer
    /// input and to its trainable parameters (aligned with [`Self::trainable`]).
    ///
    /// `input` and `output` are the tensors observed in the forward pass;
    /// `mode` must match the mode the forward ran in.
    pub fn backward(
        &self,
        input: &Tensor,
        output: &Tensor,
        grad_out: &Tensor,
        mode: BnMode,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        if grad_out.shape() != output.shape() {
            return Err(Error::ShapeMismatch(format!(
                "grad shape {:?} vs output shape {:?}",
                grad_out.shape(),
                output.shape()
            )));
        }
        match self {
            LayerSpec::Conv2d {
                weight,
                bias: _,
                stride,
                padding,
            } => conv2d_backward(input, weight, grad_out, *stride, *padding),
            LayerSpec::Linear { weight, .. } => linear_backward(input, weight, grad_out),
            LayerSpec::BatchNorm {
                gamma,
                running_mean,
                running_var,
                eps,
                ..
            } => batch_norm_backward(
                input,
                gamma,
                running_mean,
                running_var,
                *eps,
                grad_out,
                mode,
            ),
            LayerSpec::Relu => {
                // subgradient at exactly 0 is 0
                let mut g = grad_out.clone();
                for (gi, &xi) in g.data_mut().iter_mut().zip(input.data()) {
                    if xi <= 0.0 {
                        *gi = 0.0;
                    }
                }
                Ok((g, vec![]))
            }
            LayerSpec::MaxPool { size, stride } => {
                Ok((max_pool_backward(input, grad_out, *size, *stride), vec![]))
            }
            LayerSpec::AvgPool { size, stride } => {
                Ok((avg_pool_backward(input, grad_out, *size, *stride), vec![]))
            }
            LayerSpec::Flatten => Ok((grad_out.reshaped(input.shape().to_vec())?, vec![])),
            LayerSpec::Softmax => Ok((softmax_backward(output, grad_out), vec![])),
        }
    }
}

/// Valid kernel index range `[k0, k1)` such that `pos*stride + k - padding`
/// stays inside `[0, len)`.
#[inline]
fn valid_kernel_range(
    pos: usize,
    stride: usize,
    padding: usize,
    k_len: usize,
    len: usize,
) -> (usize, usize, isize) {
    let origin = (pos * stride) as isize - padding as isize;
    let k0 = (-origin).max(0) as usize;
    let k1 = ((len as isize - origin).max(0) as usize).min(k_len);
    (k0, k1, origin)
}

fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> Tensor {
    let [n, c_in, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let ws = weight.shape();
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let x = input.data();
    let wd = weight.data();
    let mut out = vec![0.0f32; n * c_out * oh * ow];
    for b in 0..n {
        for oc in 0..c_out {
            for oy in 0..oh {
                let (ky0, ky1, oy_origin) = valid_kernel_range(oy, stride, padding, kh, h);
                let out_row = ((b * c_out + oc) * oh + oy) * ow;
                for ox in 0..ow {
                    let (kx0, kx1, ox_origin) = valid_kernel_range(ox, stride, padding, kw, w);
                    let mut acc = bias.data()[oc];
                    for ic in 0..c_in {
                        let x_chan = (b * c_in + ic) * h * w;
                        let w_chan = (oc * c_in + ic) * kh * kw;
                        for ky in ky0..ky1 {
                            let iy = (oy_origin + ky as isize) as usize;
                            let x_row = x_chan + iy * w + (ox_origin + kx0 as isize) as usize;
                            let w_row = w_chan + ky * kw + kx0;
                            let span = kx1 - kx0;
                            acc += x[x_row..x_row + span]
                                .iter()
                                .zip(&wd[w_row..w_row + span])
                                .map(|(&a, &b)| a * b)
                                .sum::<f32>();
                        }
                    }
                    out[out_row + ox] = acc;
                }
            }
        }
    }
    Tensor::from_raw(out_shape.to_vec(), out)
}

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let [n, c_in, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let ws = weight.shape();
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let x = input.data();
    let wd = weight.data();
    let go = grad_out.data();

    let mut gx = vec![0.0f32; input.len()];
    let mut gw = vec![0.0f32; weight.len()];
    let mut gb = vec![0.0f32; c_out];

    for b in 0..n {
        for oc in 0..c_out {
            for oy in 0..oh {
                let (ky0, ky1, oy_origin) = valid_kernel_range(oy, stride, padding, kh, h);
                for ox in 0..ow {
                    let g = go[((b * c_out + oc) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    gb[oc] += g;
                    let (kx0, kx1, ox_origin) = valid_kernel_range(ox, stride, padding, kw, w);
                    let span = kx1 - kx0;
                    for ic in 0..c_in {
                        let x_chan = (b * c_in + ic) * h * w;
                        let w_chan = (oc * c_in + ic) * kh * kw;
                        for ky in ky0..ky1 {
                            let iy = (oy_origin + ky as isize) as usize;
                            let row = x_chan + iy * w + (ox_origin + kx0 as isize) as usize;
                            let w_row = w_chan + ky * kw + kx0;
                            for (gxi, &wi) in
                                gx[row..row + span].iter_mut().zip(&wd[w_row..w_row + span])
                            {
                                *gxi += wi * g;
                            }
                            for (gwi, &xi) in
                                gw[w_row..w_row + span].iter_mut().zip(&x[row..row + span])
                            {
                                *gwi += xi * g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_raw(input.shape().to_vec(), gx),
        vec![
            Tensor::from_raw(weight.shape().to_vec(), gw),
            Tensor::from_raw(vec![c_out], gb),
        ],
    ))
}

fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, out_shape: &[usize]) -> Tensor {
    let (n, f_in) = (input.shape()[0], input.shape()[1]);
    let f_out = weight.shape()[0];
    let x = input.data();
    let wd = weight.data();
    let mut out = vec![0.0f32; n * f_out];
    for b in 0..n {
        let row = &x[b * f_in..(b + 1) * f_in];
        for o in 0..f_out {
            let wrow = &wd[o * f_in..(o + 1) * f_in];
            let dot: f64 = row
                .iter()
                .zip(wrow)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            out[b * f_out + o] = (bias.data()[o] as f64 + dot) as f32;
        }
    }
    Tensor::from_raw(out_shape.to_vec(), out)
}

fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (n, f_in) = (input.shape()[0], input.shape()[1]);
    let f_out = weight.shape()[0];
    let x = input.data();
    let wd = weight.data();
    let go = grad_out.data();

    let mut gx = vec![0.0f32; n * f_in];
    let mut gw = vec![0.0f32; f_out * f_in];
    let mut gb = vec![0.0f32; f_out];
    for b in 0..n {
        for o in 0..f_out {
            let g = go[b * f_out + o];
            gb[o] += g;
            let wrow = &wd[o * f_in..(o + 1) * f_in];
            let xrow = &x[b * f_in..(b + 1) * f_in];
            let gxrow = &mut gx[b * f_in..(b + 1) * f_in];
            for i in 0..f_in {
                gxrow[i] += wrow[i] * g;
            }
            let gwrow = &mut gw[o * f_in..(o + 1) * f_in];
            for i in 0..f_in {
                gwrow[i] += xrow[i] * g;
            }
        }
    }
    Ok((
        Tensor::from_raw(vec![n, f_in], gx),
        vec![
            Tensor::from_raw(vec![f_out, f_in], gw),
            Tensor::from_raw(vec![f_out], gb),
        ],
    ))
}

/// Per-channel batch mean and population variance over all axes but axis 1.
fn batch_moments(input: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let channels = input.shape()[1];
    let per_channel = (input.len() / channels) as f64;
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for c in 0..channels {
        let mut sum = 0.0f64;
        input.for_each_in_slice(1, c, |x| sum += x as f64);
        mean[c] = sum / per_channel;
        let mut sq = 0.0f64;
        input.for_each_in_slice(1, c, |x| {
            let d = x as f64 - mean[c];
            sq += d * d;
        });
        var[c] = sq / per_channel;
    }
    (mean, var)
}

fn batch_norm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f32,
    mode: BnMode,
) -> Result<(Tensor, Option<BatchStats>)> {
    let channels = gamma.len();
    let (mean, var, stats) = match mode {
        BnMode::Inference => {
            let mean: Vec<f64> = running_mean.data().iter().map(|&x| x as f64).collect();
            let var: Vec<f64> = running_var.data().iter().map(|&x| x as f64).collect();
            (mean, var, None)
        }
        BnMode::Training => {
            let (mean, var) = batch_moments(input);
            let stats = BatchStats {
                mean: mean.iter().map(|&x| x as f32).collect(),
                var: var.iter().map(|&x| x as f32).collect(),
            };
            (mean, var, Some(stats))
        }
    };
    let scale: Vec<f64> = (0..channels)
        .map(|c| gamma.data()[c] as f64 / (var[c] + eps as f64).sqrt())
        .collect();
    let shift: Vec<f64> = (0..channels)
        .map(|c| beta.data()[c] as f64 - mean[c] * scale[c])
        .collect();

    let mut out = input.clone();
    let shape = out.shape().to_vec();
    let inner: usize = shape[2..].iter().product();
    let data = out.data_mut();
    for b in 0..shape[0] {
        for c in 0..channels {
            let base = (b * channels + c) * inner;
            for v in &mut data[base..base + inner] {
                *v = (*v as f64 * scale[c] + shift[c]) as f32;
            }
        }
    }
    Ok((out, stats))
}

fn batch_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f32,
    grad_out: &Tensor,
    mode: BnMode,
) -> Result<(Tensor, Vec<Tensor>)> {
    let channels = gamma.len();
    let shape = input.shape().to_vec();
    let inner: usize = shape[2..].iter().product();
    let per_channel = (input.len() / channels) as f64;

    let (mean, var) = match mode {
        BnMode::Inference => (
            running_mean
                .data()
                .iter()
                .map(|&x| x as f64)
                .collect::<Vec<_>>(),
            running_var
                .data()
                .iter()
                .map(|&x| x as f64)
                .collect::<Vec<_>>(),
        ),
        BnMode::Training => batch_moments(input),
    };
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps as f64).sqrt()).collect();

    // per-channel reductions over grad_out and normalized input
    let mut sum_g = vec![0.0f64; channels];
    let mut sum_gx = vec![0.0f64; channels];
    let x = input.data();
    let go = grad_out.data();
    for b in 0..shape[0] {
        for c in 0..channels {
            let base = (b * channels + c) * inner;
            for i in base..base + inner {
                let xhat = (x[i] as f64 - mean[c]) * inv_std[c];
                sum_g[c] += go[i] as f64;
                sum_gx[c] += go[i] as f64 * xhat;
            }
        }
    }

    let mut gx = vec![0.0f32; input.len()];
    for b in 0..shape[0] {
        for c in 0..channels {
            let g_scale = gamma.data()[c] as f64 * inv_std[c];
            let base = (b * channels + c) * inner;
            for i in base..base + inner {
                let g = go[i] as f64;
                let val = match mode {
                    // running statistics are constants
                    BnMode::Inference => g * g_scale,
                    BnMode::Training => {
                        let xhat = (x[i] as f64 - mean[c]) * inv_std[c];
                        g_scale * (g - sum_g[c] / per_channel - xhat * sum_gx[c] / per_channel)
                    }
                };
                gx[i] += val as f32;
            }
        }
    }

    let g_gamma: Vec<f32> = sum_gx.iter().map(|&v| v as f32).collect();
    let g_beta: Vec<f32> = sum_g.iter().map(|&v| v as f32).collect();
    Ok((
        Tensor::from_raw(shape, gx),
        vec![Tensor::scalar_1d(&g_gamma), Tensor::scalar_1d(&g_beta)],
    ))
}

fn pool_forward(
    input: &Tensor,
    size: usize,
    stride: usize,
    out_shape: &[usize],
    max: bool,
) -> Tensor {
    let [n, c, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let x = input.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut acc = 0.0f64;
                    for ky in 0..size {
                        let row = plane + (oy * stride + ky) * w + ox * stride;
                        for kx in 0..size {
                            let v = x[row + kx];
                            if max {
                                if v > best {
                                    best = v;
                                }
                            } else {
                                acc += v as f64;
                            }
                        }
                    }
                    out[((b * c + ch) * oh + oy) * ow + ox] = if max {
                        best
                    } else {
                        (acc / (size * size) as f64) as f32
                    };
                }
            }
        }
    }
    Tensor::from_raw(out_shape.to_vec(), out)
}

fn max_pool_backward(input: &Tensor, grad_out: &Tensor, size: usize, stride: usize) -> Tensor {
    let [n, c, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let x = input.data();
    let go = grad_out.data();
    let mut gx = vec![0.0f32; input.len()];
    for b in 0..n {
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    // first-encountered max wins on ties (fixed scan order)
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..size {
                        let row = plane + (oy * stride + ky) * w + ox * stride;
                        for kx in 0..size {
                            if x[row + kx] > best {
                                best = x[row + kx];
                                best_idx = row + kx;
                            }
                        }
                    }
                    gx[best_idx] += go[((b * c + ch) * oh + oy) * ow + ox];
                }
            }
        }
    }
    Tensor::from_raw(input.shape().to_vec(), gx)
}

fn avg_pool_backward(input: &Tensor, grad_out: &Tensor, size: usize, stride: usize) -> Tensor {
    let [n, c, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let go = grad_out.data();
    let inv = 1.0 / (size * size) as f32;
    let mut gx = vec![0.0f32; input.len()];
    for b in 0..n {
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = go[((b * c + ch) * oh + oy) * ow + ox] * inv;
                    for ky in 0..size {
                        let row = plane + (oy * stride + ky) * w + ox * stride;
                        for kx in 0..size {
                            gx[row + kx] += g;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_raw(input.shape().to_vec(), gx)
}

/// Row-wise softmax with max subtraction.
fn softmax_forward(input: &Tensor) -> Tensor {
    let (n, k) = (input.shape()[0], input.shape()[1]);
    let x = input.data();
    let mut out = vec![0.0f32; n * k];
    for b in 0..n {
        let row = &x[b * k..(b + 1) * k];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v - m) as f64).exp();
        }
        for (i, &v) in row.iter().enumerate() {
            out[b * k + i] = (((v - m) as f64).exp() / denom) as f32;
        }
    }
    Tensor::from_raw(vec![n, k], out)
}

fn softmax_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let (n, k) = (output.shape()[0], output.shape()[1]);
    let p = output.data();
    let go = grad_out.data();
    let mut gx = vec![0.0f32; n * k];
    for b in 0..n {
        let mut dot = 0.0f64;
        for i in 0..k {
            dot += p[b * k + i] as f64 * go[b * k + i] as f64;
        }
        for i in 0..k {
            gx[b * k + i] = (p[b * k + i] as f64 * (go[b * k + i] as f64 - dot)) as f32;
        }
    }
    Tensor::from_raw(vec![n, k], gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward_definition() {
        let t = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let out = LayerSpec::Relu.forward(&t).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn batch_norm_identity_case() {
        // gamma=1, beta=0, running_mean equal to the constant input,
        // running_var=1 -> output is all zeros (eps kept tiny)
        let input = Tensor::filled(vec![2, 3, 2, 2], 5.0);
        let bn = LayerSpec::BatchNorm {
            gamma: Tensor::scalar_1d(&[1.0, 1.0, 1.0]),
            beta: Tensor::scalar_1d(&[0.0, 0.0, 0.0]),
            running_mean: Tensor::scalar_1d(&[5.0, 5.0, 5.0]),
            running_var: Tensor::scalar_1d(&[1.0, 1.0, 1.0]),
            eps: 1e-12,
        };
        let out = bn.forward(&input).unwrap();
        assert!(out.data().iter().all(|&x| x.abs() < 1e-6));
    }

    #[test]
    fn one_by_one_conv_scalar_multiply() {
        let input = Tensor::filled(vec![1, 1, 2, 2], 1.0);
        let conv = LayerSpec::Conv2d {
            weight: Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(),
            bias: Tensor::scalar_1d(&[0.0]),
            stride: 1,
            padding: 0,
        };
        let out = conv.forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn conv_padding_and_stride_shapes() {
        let conv = LayerSpec::Conv2d {
            weight: Tensor::zeros(vec![4, 3, 3, 3]),
            bias: Tensor::zeros(vec![4]),
            stride: 2,
            padding: 1,
        };
        assert_eq!(
            conv.output_shape(&[2, 3, 16, 16]).unwrap(),
            vec![2, 4, 8, 8]
        );
    }

    #[test]
    fn invalid_params_rejected() {
        let conv = LayerSpec::Conv2d {
            weight: Tensor::zeros(vec![1, 1, 1, 1]),
            bias: Tensor::zeros(vec![1]),
            stride: 0,
            padding: 0,
        };
        assert!(matches!(conv.validate(), Err(Error::InvalidLayerParam(_))));
        let bn = LayerSpec::BatchNorm {
            gamma: Tensor::scalar_1d(&[1.0]),
            beta: Tensor::scalar_1d(&[0.0]),
            running_mean: Tensor::scalar_1d(&[0.0]),
            running_var: Tensor::scalar_1d(&[1.0]),
            eps: 0.0,
        };
        assert!(bn.validate().is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let lin = LayerSpec::Linear {
            weight: Tensor::zeros(vec![4, 8]),
            bias: Tensor::zeros(vec![4]),
        };
        assert!(lin.forward(&Tensor::zeros(vec![2, 7])).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let p = LayerSpec::Softmax.forward(&t).unwrap();
        for b in 0..2 {
            let s: f32 = p.data()[b * 3..(b + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(p.data()[b * 3..(b + 1) * 3]
                .iter()
                .all(|&x| x > 0.0 && x < 1.0));
        }
        // extreme logits still sum to 1 and stay finite
        let t = Tensor::new(vec![1, 3], vec![-500.0, 0.0, 500.0]).unwrap();
        let p = LayerSpec::Softmax.forward(&t).unwrap();
        let s: f32 = p.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(p.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn max_pool_forward_and_backward_routing() {
        let input = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let pool = LayerSpec::MaxPool { size: 2, stride: 2 };
        let out = pool.forward(&input).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let g = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let (gx, _) = pool.backward(&input, &out, &g, BnMode::Inference).unwrap();
        assert_eq!(gx.data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
