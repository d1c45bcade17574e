//! Calibration-data generation from the trained model itself.
//!
//! Starting from a standard-normal input batch, gradient descent on the
//! input minimizes three terms at once: the distance between observed
//! batch-norm input statistics and the stored running statistics, the
//! distance between the batch's global statistics and a standard normal,
//! and the distance between the softmax output and a class target. The
//! result is a class-conditioned batch that behaves like the data the model
//! was trained on, with no access to that data.

use rand::Rng;
use rayon::prelude::*;

use crate::dataset::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::grad::{backward_pass, class_mse, forward_tape, GradHooks};
use crate::layer::{BnMode, LayerSpec};
use crate::model::{ActivationTrace, Model};
use crate::optim::Adam;
use crate::seed::{derive_seed, normal_vec, rng_from};
use crate::tensor::{channel_stats, ChannelStats, Tensor};

/// Configuration for generating one class-conditioned batch.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub target_class: usize,
    pub seed: u64,
    /// Weights for the statistics, global-Gaussian and class terms.
    pub loss_weights: (f64, f64, f64),
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.05,
            batch_size: 8,
            target_class: 0,
            seed: 42,
            loss_weights: (1.0, 1.0, 1.0),
        }
    }
}

impl GenConfig {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        let (wb, wg, wc) = self.loss_weights;
        if wb < 0.0 || wg < 0.0 || wc < 0.0 || (wb == 0.0 && wg == 0.0 && wc == 0.0) {
            return Err(Error::Config(
                "loss weights must be non-negative with at least one positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.target_class >= class_count {
            return Err(Error::Config(format!(
                "target class {} out of range for {} classes",
                self.target_class, class_count
            )));
        }
        Ok(())
    }
}

/// The three loss terms and their weighted total for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_bn: f64,
    pub l_g: f64,
    pub l_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(l_bn: f64, l_g: f64, l_c: f64, weights: (f64, f64, f64)) -> Self {
        Self {
            l_bn,
            l_g,
            l_c,
            total: weights.0 * l_bn + weights.1 * l_g + weights.2 * l_c,
        }
    }
}

/// Squared L2 distance between two channel statistics pairs:
/// `‖mean − mean'‖² + ‖std − std'‖²`.
pub fn stat_loss(observed: &ChannelStats, reference: &ChannelStats) -> Result<f64> {
    if observed.channels() != reference.channels() || observed.std.len() != reference.std.len() {
        return Err(Error::LengthMismatch {
            left: observed.channels(),
            right: reference.channels(),
        });
    }
    let mut acc = 0.0f64;
    for (o, r) in observed.mean.iter().zip(&reference.mean) {
        let d = *o as f64 - *r as f64;
        acc += d * d;
    }
    for (o, r) in observed.std.iter().zip(&reference.std) {
        let d = *o as f64 - *r as f64;
        acc += d * d;
    }
    Ok(acc)
}

/// Reference statistics stored in a batch-norm layer: running mean and the
/// square root of running variance.
fn bn_reference(layer: &LayerSpec) -> Option<ChannelStats> {
    match layer {
        LayerSpec::BatchNorm {
            running_mean,
            running_var,
            ..
        } => Some(ChannelStats {
            mean: running_mean.data().to_vec(),
            std: running_var.data().iter().map(|&v| v.sqrt()).collect(),
        }),
        _ => None,
    }
}

/// Evaluate the full generation loss from an instrumented forward pass.
///
/// `trace` must hold one batch-norm input entry per batch-norm layer of the
/// model (zero entries for models without batch norm). `l_c` compares the
/// target vector against softmax outputs, mean squared, averaged over the
/// batch.
pub fn total_loss(
    trace: &ActivationTrace,
    model: &Model,
    input: &Tensor,
    logits: &Tensor,
    target: &Tensor,
    weights: (f64, f64, f64),
) -> Result<LossBreakdown> {
    let references: Vec<(usize, ChannelStats)> = model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| bn_reference(l).map(|r| (i, r)))
        .collect();
    let observed: Vec<_> = trace.bn_entries().collect();
    if observed.len() != references.len() {
        return Err(Error::TraceMismatch {
            expected: references.len(),
            got: observed.len(),
        });
    }
    let mut l_bn = 0.0f64;
    for (entry, (layer_index, reference)) in observed.iter().zip(&references) {
        if entry.point.layer_index != *layer_index {
            return Err(Error::TraceMismatch {
                expected: *layer_index,
                got: entry.point.layer_index,
            });
        }
        l_bn += stat_loss(&entry.stats, reference)?;
    }

    let (mean, std) = input.global_stats();
    let l_g = mean * mean + (std - 1.0) * (std - 1.0);

    let (l_c, _) = class_mse(logits, target, model.outputs_probabilities())?;
    Ok(LossBreakdown::weighted(l_bn, l_g, l_c, weights))
}

/// Random target vector with entries in `[0, 1]` and a strict argmax at
/// `target_class`: the target entry is 1, the rest are uniform on
/// `[0, 0.5)`.
pub fn make_target(class_count: usize, target_class: usize, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let mut v: Vec<f32> = (0..class_count)
        .map(|_| (rng.random::<f64>() * 0.5) as f32)
        .collect();
    v[target_class] = 1.0;
    Tensor::scalar_1d(&v)
}

/// Loss value and input-space gradient for the statistics term
/// `(‖μ−μ_ref‖² + ‖σ−σ_ref‖²)` of one activation tensor over channel axis 1.
fn stat_term_grad(x: &Tensor, reference: &ChannelStats) -> Result<(f64, Tensor)> {
    let observed = channel_stats(x, 1)?;
    let loss = stat_loss(&observed, reference)?;

    let channels = observed.channels();
    let per_channel = (x.len() / channels) as f64;
    let shape = x.shape().to_vec();
    let inner: usize = shape[2..].iter().product();
    let mut grad = vec![0.0f32; x.len()];
    let data = x.data();
    for b in 0..shape[0] {
        for c in 0..channels {
            let mu = observed.mean[c] as f64;
            let sd = observed.std[c] as f64;
            let dmu = 2.0 * (mu - reference.mean[c] as f64) / per_channel;
            let dsd_coeff = if sd > 0.0 {
                2.0 * (sd - reference.std[c] as f64) / (per_channel * sd)
            } else {
                0.0
            };
            let base = (b * channels + c) * inner;
            for i in base..base + inner {
                grad[i] = (dmu + dsd_coeff * (data[i] as f64 - mu)) as f32;
            }
        }
    }
    Ok((loss, Tensor::from_raw(shape, grad)))
}

/// Loss value and gradient for the global standard-normal term on the
/// whole input batch.
fn gaussian_term_grad(x: &Tensor) -> (f64, Tensor) {
    let (mean, std) = x.global_stats();
    let loss = mean * mean + (std - 1.0) * (std - 1.0);
    let n = x.len() as f64;
    let dmu = 2.0 * mean / n;
    let dsd_coeff = if std > 0.0 {
        2.0 * (std - 1.0) / (n * std)
    } else {
        0.0
    };
    let grad: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| (dmu + dsd_coeff * (v as f64 - mean)) as f32)
        .collect();
    (loss, Tensor::from_raw(x.shape().to_vec(), grad))
}

/// Per-epoch record of one generation run.
#[derive(Debug, Clone, Default)]
pub struct GenTrace {
    pub epochs: Vec<LossBreakdown>,
    /// Mean softmax probability of the target class, sampled every 10
    /// epochs and once at the end.
    pub class_prob_checkpoints: Vec<f64>,
}

/// One generation step's loss terms and the full gradient with respect to
/// the input batch (statistics hooks, global-Gaussian term and class term
/// combined under `weights`).
pub fn generation_gradient(
    model: &Model,
    input: &Tensor,
    target: &Tensor,
    weights: (f64, f64, f64),
) -> Result<(LossBreakdown, Tensor)> {
    let (w_bn, w_g, w_c) = weights;
    let tape = forward_tape(model, input, BnMode::Inference)?;

    let mut l_bn = 0.0f64;
    let mut hooks = GradHooks::default();
    for (layer_index, reference) in model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| bn_reference(l).map(|r| (i, r)))
    {
        let (loss, mut grad) = stat_term_grad(&tape.activations[layer_index], &reference)?;
        l_bn += loss;
        if w_bn != 1.0 {
            for g in grad.data_mut() {
                *g = (*g as f64 * w_bn) as f32;
            }
        }
        hooks.at_layer_input.push((layer_index, grad));
    }

    let (l_g, gauss_grad) = gaussian_term_grad(input);
    let (l_c, mut output_grad) = class_mse(tape.output(), target, model.outputs_probabilities())?;

    if w_c != 1.0 {
        for g in output_grad.data_mut() {
            *g = (*g as f64 * w_c) as f32;
        }
    }
    let (mut input_grad, _) = backward_pass(model, &tape, &output_grad, &hooks, false)?;
    for (gi, gg) in input_grad.data_mut().iter_mut().zip(gauss_grad.data()) {
        *gi += (*gg as f64 * w_g) as f32;
    }
    Ok((LossBreakdown::weighted(l_bn, l_g, l_c, weights), input_grad))
}

/// Run the full generation loop for one class, returning the synthesized
/// batch and the per-epoch loss trace.
pub fn generate_class_batch_traced(
    model: &Model,
    config: &GenConfig,
) -> Result<(Tensor, GenTrace)> {
    let target = make_target(
        model.class_count,
        config.target_class,
        derive_seed(config.seed, 1),
    );
    generate_class_batch_with_target(model, config, &target)
}

/// Generation loop against an explicit target vector. The standard entry
/// point passes a [`make_target`] draw; a strict one-hot target turns the
/// class term into pure class-score ascent.
pub fn generate_class_batch_with_target(
    model: &Model,
    config: &GenConfig,
    target: &Tensor,
) -> Result<(Tensor, GenTrace)> {
    config.validate(model.class_count)?;
    if target.len() != model.class_count {
        return Err(Error::LengthMismatch {
            left: target.len(),
            right: model.class_count,
        });
    }
    let mut rng = rng_from(config.seed);
    let mut shape = vec![config.batch_size];
    shape.extend_from_slice(&model.input_shape);
    let numel: usize = shape.iter().product();
    let mut input = Tensor::new(shape, normal_vec(&mut rng, numel))?;

    let mut opt = Adam::new(input.len(), config.learning_rate);
    let mut trace = GenTrace::default();

    for epoch in 0..config.epochs {
        let (breakdown, input_grad) =
            generation_gradient(model, &input, target, config.loss_weights)?;
        if !breakdown.total.is_finite() {
            return Err(Error::DivergedLoss { class: None });
        }
        if epoch % 10 == 0 {
            let output = model.forward(&input)?;
            trace.class_prob_checkpoints.push(mean_target_prob(
                model,
                &output,
                config.target_class,
            ));
        }
        trace.epochs.push(breakdown);

        let grad_data = input_grad.data().to_vec();
        opt.step(input.data_mut(), &grad_data);
        if !input.all_finite() {
            return Err(Error::DivergedLoss { class: None });
        }
    }

    let output = model.forward(&input)?;
    trace
        .class_prob_checkpoints
        .push(mean_target_prob(model, &output, config.target_class));
    Ok((input, trace))
}

fn mean_target_prob(model: &Model, output: &Tensor, class: usize) -> f64 {
    let probs = if model.outputs_probabilities() {
        output.clone()
    } else {
        LayerSpec::Softmax.forward(output).expect("rank-2 output")
    };
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    (0..n)
        .map(|b| probs.data()[b * k + class] as f64)
        .sum::<f64>()
        / n as f64
}

/// Synthesize one batch for `config.target_class`. The model is read-only;
/// equal configurations give bit-identical batches.
pub fn generate_class_batch(model: &Model, config: &GenConfig) -> Result<Tensor> {
    Ok(generate_class_batch_traced(model, config)?.0)
}

/// Synthesize `per_class` samples for every class. Classes generate
/// independently (in parallel) from seeds derived per class, then assemble
/// in class order.
pub fn generate_dataset(
    model: &Model,
    per_class: usize,
    template: &GenConfig,
) -> Result<LabeledDataset> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    let configs: Vec<GenConfig> = (0..model.class_count)
        .map(|c| GenConfig {
            target_class: c,
            batch_size: per_class,
            seed: derive_seed(template.seed, c as u64),
            ..template.clone()
        })
        .collect();

    let batches: Vec<Result<Tensor>> = configs
        .par_iter()
        .map(|cfg| {
            generate_class_batch(model, cfg).map_err(|e| match e {
                Error::DivergedLoss { .. } => Error::DivergedLoss {
                    class: Some(cfg.target_class),
                },
                other => other,
            })
        })
        .collect();

    let per_sample: usize = model.input_shape.iter().product();
    let mut data = Vec::with_capacity(model.class_count * per_class * per_sample);
    let mut labels = Vec::with_capacity(model.class_count * per_class);
    for (c, batch) in batches.into_iter().enumerate() {
        let batch = batch?;
        data.extend_from_slice(batch.data());
        labels.extend(std::iter::repeat_n(c, per_class));
    }
    let mut shape = vec![model.class_count * per_class];
    shape.extend_from_slice(&model.input_shape);
    LabeledDataset::new(
        Tensor::new(shape, data)?,
        labels,
        Provenance::Retro,
        template.seed,
    )
}
