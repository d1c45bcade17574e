//! Model-level reverse-mode differentiation.
//!
//! Models are sequential chains, so the backward pass is a tape walk: the
//! forward pass keeps every intermediate activation, then gradients flow
//! from the output back to the input. Losses that depend on interior
//! activations (the statistics losses of the data generator) inject their
//! contribution through [`GradHooks`] while the walk passes their layer.

use crate::error::{Error, Result};
use crate::layer::{BatchStats, BnMode, LayerSpec};
use crate::model::Model;
use crate::tensor::Tensor;

/// All activations of one forward pass: `activations[i]` is the input to
/// layer `i`, `activations[layers.len()]` is the network output.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub activations: Vec<Tensor>,
    pub batch_stats: Vec<Option<BatchStats>>,
    pub mode: BnMode,
}

impl ForwardTape {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("tape holds the output")
    }
}

/// Record a forward pass through every layer.
pub fn forward_tape(model: &Model, batch: &Tensor, mode: BnMode) -> Result<ForwardTape> {
    let mut activations = Vec::with_capacity(model.layers.len() + 1);
    let mut batch_stats = Vec::with_capacity(model.layers.len());
    activations.push(batch.clone());
    for layer in &model.layers {
        let current = activations.last().unwrap();
        let (out, stats) = match mode {
            BnMode::Inference => (layer.forward(current)?, None),
            BnMode::Training => layer.forward_train(current)?,
        };
        batch_stats.push(stats);
        activations.push(out);
    }
    Ok(ForwardTape {
        activations,
        batch_stats,
        mode,
    })
}

/// Extra gradient contributions injected at interior activations.
///
/// `at_layer_input[i] = g` adds `g` to the gradient of the tensor feeding
/// layer `i` once the backward walk reaches it.
#[derive(Debug, Default)]
pub struct GradHooks {
    pub at_layer_input: Vec<(usize, Tensor)>,
}

/// Per-layer parameter gradients, aligned with `LayerSpec::trainable`.
pub type LayerGrads = Vec<Vec<Tensor>>;

/// Walk the tape backwards from `output_grad`, returning the gradient with
/// respect to the model input and (if requested) all parameter gradients.
pub fn backward_pass(
    model: &Model,
    tape: &ForwardTape,
    output_grad: &Tensor,
    hooks: &GradHooks,
    want_params: bool,
) -> Result<(Tensor, LayerGrads)> {
    if output_grad.shape() != tape.output().shape() {
        return Err(Error::ShapeMismatch(format!(
            "output grad shape {:?} vs output {:?}",
            output_grad.shape(),
            tape.output().shape()
        )));
    }
    let mut grad = output_grad.clone();
    let mut param_grads: LayerGrads = vec![Vec::new(); model.layers.len()];
    for (i, layer) in model.layers.iter().enumerate().rev() {
        let input = &tape.activations[i];
        let output = &tape.activations[i + 1];
        let (gx, gp) = layer.backward(input, output, &grad, tape.mode)?;
        if want_params {
            param_grads[i] = gp;
        }
        grad = gx;
        for (at, extra) in &hooks.at_layer_input {
            if *at == i {
                add_into(&mut grad, extra)?;
            }
        }
    }
    Ok((grad, param_grads))
}

fn add_into(dst: &mut Tensor, src: &Tensor) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::ShapeMismatch(format!(
            "hook grad shape {:?} vs activation {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
    Ok(())
}

/// Scalar losses evaluated on the network output, differentiable with
/// respect to it.
#[derive(Debug, Clone)]
pub enum LossSpec {
    /// Sum of all output elements.
    SumOutput,
    /// Mean squared error between a per-class target vector and the
    /// softmax of the output, averaged over the batch.
    ClassMse { target: Tensor },
    /// Cross-entropy against integer labels, averaged over the batch.
    CrossEntropy { labels: Vec<usize> },
}

impl LossSpec {
    /// Loss value and its gradient with respect to `output`.
    pub fn eval(&self, output: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            LossSpec::SumOutput => {
                let loss = output.data().iter().map(|&x| x as f64).sum();
                Ok((loss, Tensor::filled(output.shape().to_vec(), 1.0)))
            }
            LossSpec::ClassMse { target } => class_mse(output, target, false),
            LossSpec::CrossEntropy { labels } => cross_entropy(output, labels, false),
        }
    }

    /// Same as [`Self::eval`] for models whose final layer already applies
    /// softmax (the output is treated as probabilities directly).
    pub fn eval_on_probabilities(&self, output: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            LossSpec::SumOutput => self.eval(output),
            LossSpec::ClassMse { target } => class_mse(output, target, true),
            LossSpec::CrossEntropy { labels } => cross_entropy(output, labels, true),
        }
    }
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    LayerSpec::Softmax.forward(logits).expect("rank-2 logits")
}

/// MSE(target, softmax(output)) averaged over batch and classes, plus its
/// gradient with respect to `output`.
pub fn class_mse(output: &Tensor, target: &Tensor, already_probs: bool) -> Result<(f64, Tensor)> {
    let (n, k) = (output.shape()[0], output.shape()[1]);
    if target.len() != k {
        return Err(Error::LengthMismatch {
            left: target.len(),
            right: k,
        });
    }
    let probs = if already_probs {
        output.clone()
    } else {
        softmax_rows(output)
    };
    let p = probs.data();
    let t = target.data();
    let mut loss = 0.0f64;
    let mut grad_p = vec![0.0f32; n * k];
    let scale = 1.0 / (n * k) as f64;
    for b in 0..n {
        for j in 0..k {
            let d = p[b * k + j] as f64 - t[j] as f64;
            loss += d * d * scale;
            grad_p[b * k + j] = (2.0 * d * scale) as f32;
        }
    }
    let grad_p = Tensor::from_raw(vec![n, k], grad_p);
    if already_probs {
        return Ok((loss, grad_p));
    }
    // chain through softmax: dL/dz_i = p_i (g_i - sum_j g_j p_j)
    let mut grad = vec![0.0f32; n * k];
    for b in 0..n {
        let mut dot = 0.0f64;
        for j in 0..k {
            dot += p[b * k + j] as f64 * grad_p.data()[b * k + j] as f64;
        }
        for j in 0..k {
            grad[b * k + j] =
                (p[b * k + j] as f64 * (grad_p.data()[b * k + j] as f64 - dot)) as f32;
        }
    }
    Ok((loss, Tensor::from_raw(vec![n, k], grad)))
}

/// Mean cross-entropy over the batch plus its gradient with respect to the
/// logits (or probabilities when `already_probs`).
pub fn cross_entropy(
    output: &Tensor,
    labels: &[usize],
    already_probs: bool,
) -> Result<(f64, Tensor)> {
    let (n, k) = (output.shape()[0], output.shape()[1]);
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: n,
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::ShapeMismatch(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let probs = if already_probs {
        output.clone()
    } else {
        softmax_rows(output)
    };
    let p = probs.data();
    let floor = 1e-12f64;
    let mut loss = 0.0f64;
    for (b, &label) in labels.iter().enumerate() {
        loss -= (p[b * k + label] as f64).max(floor).ln();
    }
    loss /= n as f64;

    let mut grad = vec![0.0f32; n * k];
    if already_probs {
        for (b, &label) in labels.iter().enumerate() {
            let pi = (p[b * k + label] as f64).max(floor);
            grad[b * k + label] = (-1.0 / (pi * n as f64)) as f32;
        }
    } else {
        // softmax + cross-entropy collapses to (p - onehot) / n
        for b in 0..n {
            for j in 0..k {
                let onehot = if labels[b] == j { 1.0 } else { 0.0 };
                grad[b * k + j] = ((p[b * k + j] as f64 - onehot) / n as f64) as f32;
            }
        }
    }
    Ok((loss, Tensor::from_raw(vec![n, k], grad)))
}

/// Gradient of a scalar loss with respect to the model input. Parameters
/// are read-only.
pub fn input_gradient(model: &Model, input: &Tensor, loss: &LossSpec) -> Result<Tensor> {
    let tape = forward_tape(model, input, BnMode::Inference)?;
    let (_, output_grad) = if model.outputs_probabilities() {
        loss.eval_on_probabilities(tape.output())?
    } else {
        loss.eval(tape.output())?
    };
    let (gx, _) = backward_pass(model, &tape, &output_grad, &GradHooks::default(), false)?;
    Ok(gx)
}

/// Cross-entropy parameter gradients for a labeled batch, one gradient per
/// trainable tensor per layer. Returns the batch loss alongside.
pub fn param_gradients(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    mode: BnMode,
) -> Result<(f64, LayerGrads, ForwardTape)> {
    if batch.shape()[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != batch.shape()[0] {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: batch.shape()[0],
        });
    }
    let tape = forward_tape(model, batch, mode)?;
    let loss_spec = LossSpec::CrossEntropy {
        labels: labels.to_vec(),
    };
    let (loss, output_grad) = if model.outputs_probabilities() {
        loss_spec.eval_on_probabilities(tape.output())?
    } else {
        loss_spec.eval(tape.output())?
    };
    let (_, grads) = backward_pass(model, &tape, &output_grad, &GradHooks::default(), true)?;
    Ok((loss, grads, tape))
}
