//! Desk-scale experiment harness: synthetic labeled data, a mini trainer
//! for FP32 reference models (with and without batch norm), top-1
//! evaluation and sensitivity reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::grad::param_gradients;
use crate::layer::{BnMode, LayerSpec};
use crate::model::Model;
use crate::optim::Adam;
use crate::quant::{QuantModel, SchemeLabel};
use crate::seed::{derive_seed, normal_vec, rng_from};
use crate::tensor::Tensor;
use rand::Rng;

/// Default desk-scale input shape and class count.
pub const DEFAULT_INPUT_SHAPE: [usize; 3] = [1, 16, 16];
pub const DEFAULT_CLASS_COUNT: usize = 10;

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

/// Which noise stream of a synthetic dataset to draw. Templates depend on
/// the seed only, so different roles of the same seed share classes while
/// their samples stay disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Test,
}

impl SplitRole {
    fn stream(&self) -> u64 {
        match self {
            SplitRole::Train => 2,
            SplitRole::Test => 3,
        }
    }

    pub fn parse(s: &str) -> Result<SplitRole> {
        match s {
            "train" => Ok(SplitRole::Train),
            "test" => Ok(SplitRole::Test),
            other => Err(Error::Config(format!(
                "unknown split role {other:?} (expected train or test)"
            ))),
        }
    }
}

/// Default per-pixel noise level of the synthetic blobs.
pub const DEFAULT_NOISE_SIGMA: f32 = 0.5;

/// Gaussian blobs around per-class spatial templates with a chosen noise
/// level. Sample `i` carries label `i % class_count`, so any prefix is
/// close to balanced. Higher `noise_sigma` moves samples toward the class
/// decision boundaries, making accuracy sensitive to quantization.
pub fn synth_dataset_noisy(
    seed: u64,
    role: SplitRole,
    class_count: usize,
    per_class: usize,
    input_shape: &[usize],
    noise_sigma: f32,
) -> Result<LabeledDataset> {
    if class_count < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    let numel: usize = input_shape.iter().product();
    let templates = synth_templates(seed, class_count, input_shape);
    let mut rng = rng_from(derive_seed(seed, role.stream()));

    let n = class_count * per_class;
    let mut data = Vec::with_capacity(n * numel);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % class_count;
        let noise = normal_vec(&mut rng, numel);
        data.extend(
            templates[c]
                .iter()
                .zip(&noise)
                .map(|(&t, &e)| t + noise_sigma * e),
        );
        labels.push(c);
    }
    let mut shape = vec![n];
    shape.extend_from_slice(input_shape);
    LabeledDataset::new(
        Tensor::new(shape, data)?,
        labels,
        Provenance::Synthetic,
        seed,
    )
}

/// [`synth_dataset_noisy`] at the default noise level.
pub fn synth_dataset_role(
    seed: u64,
    role: SplitRole,
    class_count: usize,
    per_class: usize,
    input_shape: &[usize],
) -> Result<LabeledDataset> {
    synth_dataset_noisy(
        seed,
        role,
        class_count,
        per_class,
        input_shape,
        DEFAULT_NOISE_SIGMA,
    )
}

/// The training-role split of [`synth_dataset_role`].
pub fn synth_dataset(
    seed: u64,
    class_count: usize,
    per_class: usize,
    input_shape: &[usize],
) -> Result<LabeledDataset> {
    synth_dataset_role(seed, SplitRole::Train, class_count, per_class, input_shape)
}

/// The per-class templates behind [`synth_dataset_role`], for oracle
/// classifiers.
pub fn synth_templates(seed: u64, class_count: usize, input_shape: &[usize]) -> Vec<Vec<f32>> {
    let numel: usize = input_shape.iter().product();
    let mut rng = rng_from(derive_seed(seed, 1));
    (0..class_count)
        .map(|_| normal_vec(&mut rng, numel))
        .collect()
}

/// I.i.d. standard-normal samples with uniformly drawn (unused) labels.
pub fn random_gaussian_dataset(
    seed: u64,
    n: usize,
    input_shape: &[usize],
    class_count: usize,
) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::Config("need at least 1 sample".into()));
    }
    let numel: usize = input_shape.iter().product();
    let mut rng = rng_from(seed);
    let data = normal_vec(&mut rng, n * numel);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..class_count)).collect();
    let mut shape = vec![n];
    shape.extend_from_slice(input_shape);
    LabeledDataset::new(
        Tensor::new(shape, data)?,
        labels,
        Provenance::RandomGaussian,
        seed,
    )
}

// ---------------------------------------------------------------------------
// reference architectures
// ---------------------------------------------------------------------------

/// Desk-scale reference architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Conv-BN-ReLU x3, average pool, linear head.
    CnnBn,
    /// The same stack without batch norm.
    CnnPlain,
    /// Flatten, two Linear-ReLU blocks, linear head.
    Mlp,
    /// Deeper plain CNN with six quantizable layers.
    CnnDeep,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::CnnBn => "cnn_bn",
            Arch::CnnPlain => "cnn_plain",
            Arch::Mlp => "mlp",
            Arch::CnnDeep => "cnn_deep",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "cnn_bn" => Ok(Arch::CnnBn),
            "cnn_plain" => Ok(Arch::CnnPlain),
            "mlp" => Ok(Arch::Mlp),
            "cnn_deep" => Ok(Arch::CnnDeep),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected cnn_bn, cnn_plain, mlp or cnn_deep)"
            ))),
        }
    }
}

fn he_normal(rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let n: usize = shape.iter().product();
    let scale = (2.0 / fan_in as f64).sqrt() as f32;
    let data: Vec<f32> = normal_vec(rng, n).iter().map(|&v| v * scale).collect();
    Tensor::new(shape, data).expect("init shape")
}

fn conv(rng: &mut rand_chacha::ChaCha8Rng, c_in: usize, c_out: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        weight: he_normal(rng, vec![c_out, c_in, 3, 3], c_in * 9),
        bias: Tensor::zeros(vec![c_out]),
        stride,
        padding: 1,
    }
}

fn bn(channels: usize) -> LayerSpec {
    LayerSpec::BatchNorm {
        gamma: Tensor::filled(vec![channels], 1.0),
        beta: Tensor::zeros(vec![channels]),
        running_mean: Tensor::zeros(vec![channels]),
        running_var: Tensor::filled(vec![channels], 1.0),
        eps: 1e-5,
    }
}

fn linear(rng: &mut rand_chacha::ChaCha8Rng, f_in: usize, f_out: usize) -> LayerSpec {
    LayerSpec::Linear {
        weight: he_normal(rng, vec![f_out, f_in], f_in),
        bias: Tensor::zeros(vec![f_out]),
    }
}

/// Freshly initialized (untrained) model of the given architecture.
pub fn init_model(arch: Arch, class_count: usize, seed: u64) -> Model {
    let mut rng = rng_from(derive_seed(seed, 0x1217));
    let input_shape = DEFAULT_INPUT_SHAPE.to_vec();
    let layers = match arch {
        Arch::CnnBn => vec![
            conv(&mut rng, 1, 8, 1),
            bn(8),
            LayerSpec::Relu,
            conv(&mut rng, 8, 16, 2),
            bn(16),
            LayerSpec::Relu,
            conv(&mut rng, 16, 24, 2),
            bn(24),
            LayerSpec::Relu,
            LayerSpec::AvgPool { size: 4, stride: 4 },
            LayerSpec::Flatten,
            linear(&mut rng, 24, class_count),
        ],
        Arch::CnnPlain => vec![
            conv(&mut rng, 1, 8, 1),
            LayerSpec::Relu,
            conv(&mut rng, 8, 16, 2),
            LayerSpec::Relu,
            conv(&mut rng, 16, 24, 2),
            LayerSpec::Relu,
            LayerSpec::AvgPool { size: 4, stride: 4 },
            LayerSpec::Flatten,
            linear(&mut rng, 24, class_count),
        ],
        Arch::Mlp => vec![
            LayerSpec::Flatten,
            linear(&mut rng, 256, 48),
            LayerSpec::Relu,
            linear(&mut rng, 48, 24),
            LayerSpec::Relu,
            linear(&mut rng, 24, class_count),
        ],
        Arch::CnnDeep => vec![
            conv(&mut rng, 1, 6, 1),
            bn(6),
            LayerSpec::Relu,
            conv(&mut rng, 6, 8, 2),
            bn(8),
            LayerSpec::Relu,
            conv(&mut rng, 8, 8, 1),
            bn(8),
            LayerSpec::Relu,
            conv(&mut rng, 8, 12, 2),
            bn(12),
            LayerSpec::Relu,
            LayerSpec::AvgPool { size: 4, stride: 4 },
            LayerSpec::Flatten,
            linear(&mut rng, 12, 16),
            LayerSpec::Relu,
            linear(&mut rng, 16, class_count),
        ],
    };
    let model = Model {
        name: arch.name().to_string(),
        input_shape,
        class_count,
        layers,
    };
    debug_assert!(model.validate().is_ok());
    model
}

// ---------------------------------------------------------------------------
// mini trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            learning_rate: 0.01,
            batch_size: 32,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

const BN_MOMENTUM: f64 = 0.1;

/// Train a fresh model of `arch` on `dataset` with Adam. Deterministic for
/// a fixed seed: init, batch order and every update are seed-driven.
pub fn train_reference(
    arch: Arch,
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = init_model(arch, class_count_of(dataset), config.seed);
    if dataset.sample_shape() != model.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "dataset samples {:?} vs model input {:?}",
            dataset.sample_shape(),
            model.input_shape
        )));
    }

    let mut optimizers: Vec<Vec<Adam>> = model
        .layers
        .iter()
        .map(|l| {
            l.trainable()
                .iter()
                .map(|t| Adam::new(t.len(), config.learning_rate))
                .collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = rng_from(derive_seed(config.seed, 0x5f1e));
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        shuffle(&mut order, &mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (batch, labels) = gather(dataset, chunk);
            let (loss, grads, tape) = param_gradients(&model, &batch, &labels, BnMode::Training)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_loss += loss;
            batches += 1;

            for (li, layer) in model.layers.iter_mut().enumerate() {
                let params = layer.trainable_mut();
                for (pi, param) in params.into_iter().enumerate() {
                    optimizers[li][pi].step(param.data_mut(), grads[li][pi].data());
                }
                if let (
                    LayerSpec::BatchNorm {
                        running_mean,
                        running_var,
                        ..
                    },
                    Some(stats),
                ) = (layer, &tape.batch_stats[li])
                {
                    for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
                        *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * b as f64) as f32;
                    }
                    for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var) {
                        *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * b as f64) as f32;
                    }
                }
            }
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}

fn class_count_of(dataset: &LabeledDataset) -> usize {
    dataset.labels.iter().copied().max().unwrap_or(0) + 1
}

fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

fn gather(dataset: &LabeledDataset, indices: &[usize]) -> (Tensor, Vec<usize>) {
    let per = dataset.samples.len() / dataset.len();
    let mut data = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(&dataset.samples.data()[i * per..(i + 1) * per]);
        labels.push(dataset.labels[i]);
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(dataset.sample_shape());
    (Tensor::new(shape, data).expect("gather shape"), labels)
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Anything that maps an input batch to class scores.
pub trait InferModel: Sync {
    fn forward_batch(&self, batch: &Tensor) -> Result<Tensor>;
    fn model_name(&self) -> String;
    fn scheme_desc(&self) -> String;
    fn bits_desc(&self) -> (u8, u8);
}

impl InferModel for Model {
    fn forward_batch(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch)
    }
    fn model_name(&self) -> String {
        self.name.clone()
    }
    fn scheme_desc(&self) -> String {
        "fp32".into()
    }
    fn bits_desc(&self) -> (u8, u8) {
        (32, 32)
    }
}

impl InferModel for QuantModel {
    fn forward_batch(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch)
    }
    fn model_name(&self) -> String {
        self.base.name.clone()
    }
    fn scheme_desc(&self) -> String {
        self.scheme.name().into()
    }
    fn bits_desc(&self) -> (u8, u8) {
        (self.weight_bits, self.activation_bits)
    }
}

/// Top-1 evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub scheme: String,
    pub weight_bits: u8,
    pub activation_bits: u8,
    pub correct: usize,
    pub total: usize,
    pub top1: f64,
}

/// Fraction of samples whose argmax score matches the label. Ties resolve
/// to the lowest class index; sample order does not matter.
pub fn evaluate<M: InferModel>(model: &M, dataset: &LabeledDataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batches = dataset.batches(64);
    let correct: usize = batches
        .par_iter()
        .map(|(batch, labels)| {
            let out = model.forward_batch(batch)?;
            let k = out.shape()[1];
            let mut c = 0usize;
            for (b, &label) in labels.iter().enumerate() {
                let row = &out.data()[b * k..(b + 1) * k];
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                if best == label {
                    c += 1;
                }
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    let total = dataset.len();
    let (weight_bits, activation_bits) = model.bits_desc();
    Ok(EvalReport {
        model: model.model_name(),
        scheme: model.scheme_desc(),
        weight_bits,
        activation_bits,
        correct,
        total,
        top1: correct as f64 / total as f64,
    })
}

// ---------------------------------------------------------------------------
// crafted pathologies
// ---------------------------------------------------------------------------

/// Scale the upper half of one conv layer's output channels by `factor` and
/// fold the inverse into the batch-norm layer that follows it (running mean
/// scaled by `factor`, running variance by `factor²`). The network function
/// is exactly unchanged while the conv weight tensor gains a pathological
/// cross-channel range; the compensation lives in a layer that is never
/// quantized.
pub fn craft_divergent_channels(model: &Model, conv_layer: usize, factor: f32) -> Result<Model> {
    let mut crafted = model.clone();
    let channels = match crafted.layers.get(conv_layer) {
        Some(LayerSpec::Conv2d { weight, .. }) => weight.shape()[0],
        _ => {
            return Err(Error::Config(format!(
                "layer {conv_layer} is not a conv layer"
            )))
        }
    };
    let scaled: Vec<usize> = (channels / 2..channels).collect();
    if !matches!(
        crafted.layers.get(conv_layer + 1),
        Some(LayerSpec::BatchNorm { .. })
    ) {
        return Err(Error::Config(
            "crafted conv must be followed by a batch-norm layer".into(),
        ));
    }

    if let LayerSpec::Conv2d { weight, bias, .. } = &mut crafted.layers[conv_layer] {
        let [_, c_in, kh, kw] = [
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        ];
        let per_oc = c_in * kh * kw;
        for &oc in &scaled {
            for v in &mut weight.data_mut()[oc * per_oc..(oc + 1) * per_oc] {
                *v *= factor;
            }
            bias.data_mut()[oc] *= factor;
        }
    }
    if let LayerSpec::BatchNorm {
        running_mean,
        running_var,
        ..
    } = &mut crafted.layers[conv_layer + 1]
    {
        for &c in &scaled {
            running_mean.data_mut()[c] *= factor;
            running_var.data_mut()[c] *= factor * factor;
        }
    }
    crafted.name = format!("{}_divergent", model.name);
    Ok(crafted)
}

/// Overwrite a handful of weights in one quantizable layer with
/// `±(factor · max|w|)` (sign preserved), giving the tensor tight
/// heavy-tailed outlier groups.
pub fn inject_weight_outliers(
    model: &Model,
    layer_index: usize,
    count: usize,
    factor: f32,
    seed: u64,
) -> Result<Model> {
    let mut out = model.clone();
    let layer = out
        .layers
        .get_mut(layer_index)
        .ok_or(Error::NotQuantizable(layer_index))?;
    let weight = layer
        .weight_mut()
        .ok_or(Error::NotQuantizable(layer_index))?;
    let magnitude = factor * weight.data().iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    let mut rng = rng_from(seed);
    let len = weight.len();
    for _ in 0..count {
        let i = rng.random_range(0..len);
        weight.data_mut()[i] = magnitude.copysign(weight.data()[i]);
    }
    out.name = format!("{}_outliers", model.name);
    Ok(out)
}

// ---------------------------------------------------------------------------
// sensitivity report
// ---------------------------------------------------------------------------

/// Per-layer sensitivity profiles of one model under three calibration
/// datasets, plus the distances between them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub scheme: SchemeLabel,
    pub bits: u8,
    pub layer_indices: Vec<usize>,
    pub real: Vec<f64>,
    pub retro: Vec<f64>,
    pub random: Vec<f64>,
    pub dist_retro_real: f64,
    pub dist_random_real: f64,
}

pub fn sensitivity_report(
    model: &Model,
    real: &LabeledDataset,
    retro: &LabeledDataset,
    random: &LabeledDataset,
    scheme: SchemeLabel,
    bits: u8,
) -> Result<SensitivityReport> {
    let p_real = crate::hybrid::sensitivity_profile(model, real, scheme, bits)?;
    let p_retro = crate::hybrid::sensitivity_profile(model, retro, scheme, bits)?;
    let p_random = crate::hybrid::sensitivity_profile(model, random, scheme, bits)?;
    Ok(SensitivityReport {
        scheme,
        bits,
        layer_indices: p_real.layer_indices.clone(),
        dist_retro_real: p_retro.l2_distance(&p_real)?,
        dist_random_real: p_random.l2_distance(&p_real)?,
        real: p_real.values,
        retro: p_retro.values,
        random: p_random.values,
    })
}

impl SensitivityReport {
    /// CSV rendering with the documented header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,real,retro,random\n");
        for (i, &li) in self.layer_indices.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e}\n",
                li, self.real[i], self.retro[i], self.random[i]
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_dataset_is_deterministic_and_balanced() {
        let a = synth_dataset(7, 10, 12, &DEFAULT_INPUT_SHAPE).unwrap();
        let b = synth_dataset(7, 10, 12, &DEFAULT_INPUT_SHAPE).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 120);
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 12);
        }
    }

    #[test]
    fn nearest_template_oracle_classifies_synth_data() {
        let ds = synth_dataset(11, 10, 20, &DEFAULT_INPUT_SHAPE).unwrap();
        let templates = synth_templates(11, 10, &DEFAULT_INPUT_SHAPE);
        let per: usize = DEFAULT_INPUT_SHAPE.iter().product();
        let mut correct = 0usize;
        for i in 0..ds.len() {
            let sample = &ds.samples.data()[i * per..(i + 1) * per];
            let best = templates
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = sample
                        .iter()
                        .zip(a.iter())
                        .map(|(&s, &t)| (s as f64 - t as f64).powi(2))
                        .sum();
                    let db: f64 = sample
                        .iter()
                        .zip(b.iter())
                        .map(|(&s, &t)| (s as f64 - t as f64).powi(2))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
                .0;
            if best == ds.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc > 0.9, "template oracle accuracy {acc}");
    }

    #[test]
    fn random_gaussian_moments() {
        let ds = random_gaussian_dataset(3, 400, &DEFAULT_INPUT_SHAPE, 10).unwrap();
        let (mean, std) = ds.samples.global_stats();
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((std - 1.0).abs() < 0.02, "std {std}");
        let ds2 = random_gaussian_dataset(3, 400, &DEFAULT_INPUT_SHAPE, 10).unwrap();
        assert_eq!(ds, ds2);
    }

    #[test]
    fn constant_output_model_scores_chance_on_balanced_set() {
        let model = Model {
            name: "const".into(),
            input_shape: DEFAULT_INPUT_SHAPE.to_vec(),
            class_count: 10,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    weight: Tensor::zeros(vec![10, 256]),
                    bias: Tensor::zeros(vec![10]),
                },
            ],
        };
        let ds = synth_dataset(1, 10, 10, &DEFAULT_INPUT_SHAPE).unwrap();
        let report = evaluate(&model, &ds).unwrap();
        assert_eq!(report.top1, 0.10);
    }

    #[test]
    fn self_labeled_data_scores_one() {
        let model = init_model(Arch::Mlp, 10, 5);
        let ds = synth_dataset(2, 10, 6, &DEFAULT_INPUT_SHAPE).unwrap();
        let logits = model.forward(&ds.samples).unwrap();
        let k = 10;
        let self_labels: Vec<usize> = (0..ds.len())
            .map(|b| {
                let row = &logits.data()[b * k..(b + 1) * k];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect();
        let relabeled =
            LabeledDataset::new(ds.samples.clone(), self_labels, ds.provenance, 2).unwrap();
        let report = evaluate(&model, &relabeled).unwrap();
        assert_eq!(report.top1, 1.0);
    }

    #[test]
    fn evaluate_is_order_invariant() {
        let model = init_model(Arch::Mlp, 10, 5);
        let ds = synth_dataset(2, 10, 6, &DEFAULT_INPUT_SHAPE).unwrap();
        let report = evaluate(&model, &ds).unwrap();
        // reverse the dataset
        let per: usize = DEFAULT_INPUT_SHAPE.iter().product();
        let mut data = Vec::with_capacity(ds.samples.len());
        let mut labels = Vec::with_capacity(ds.len());
        for i in (0..ds.len()).rev() {
            data.extend_from_slice(&ds.samples.data()[i * per..(i + 1) * per]);
            labels.push(ds.labels[i]);
        }
        let rev = LabeledDataset::new(
            Tensor::new(ds.samples.shape().to_vec(), data).unwrap(),
            labels,
            ds.provenance,
            2,
        )
        .unwrap();
        let report_rev = evaluate(&model, &rev).unwrap();
        assert_eq!(report.correct, report_rev.correct);
    }

    #[test]
    fn crafted_model_preserves_function() {
        let ds = synth_dataset(4, 10, 4, &DEFAULT_INPUT_SHAPE).unwrap();
        let model = init_model(Arch::CnnDeep, 10, 8);
        let crafted = craft_divergent_channels(&model, 3, 100.0).unwrap();
        let a = model.forward(&ds.samples).unwrap();
        let b = crafted.forward(&ds.samples).unwrap();
        for (&x, &y) in a.data().iter().zip(b.data()) {
            assert!(
                (x - y).abs() <= 1e-4 * x.abs().max(1.0),
                "outputs diverged: {x} vs {y}"
            );
        }
        // the crafted layer now has a 100x cross-channel range
        let w = crafted.layers[3].weight().unwrap();
        let p = crate::quant::per_channel_params(w, 8, 0).unwrap();
        let max_s = p.scales.iter().cloned().fold(0.0f64, f64::max);
        let min_s = p.scales.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max_s / min_s > 50.0);
    }

    #[test]
    fn injected_outliers_form_tight_groups() {
        let model = init_model(Arch::CnnBn, 10, 8);
        let damaged = inject_weight_outliers(&model, 3, 4, 16.0, 99).unwrap();
        let w = damaged.layers[3].weight().unwrap();
        let base_max = model.layers[3]
            .weight()
            .unwrap()
            .data()
            .iter()
            .fold(0.0f32, |m, &v| m.max(v.abs()));
        let outliers: Vec<f32> = w
            .data()
            .iter()
            .cloned()
            .filter(|v| v.abs() > 2.0 * base_max)
            .collect();
        assert!(!outliers.is_empty());
        for o in &outliers {
            assert_eq!(o.abs(), 16.0 * base_max);
        }
    }

    #[test]
    fn crafting_rejects_non_conv_targets() {
        let model = init_model(Arch::Mlp, 10, 8);
        assert!(craft_divergent_channels(&model, 1, 100.0).is_err());
    }
}
