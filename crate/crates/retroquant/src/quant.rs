//! Asymmetric uniform affine quantization, activation-range calibration and
//! simulated-quantization models.
//!
//! Quantization is simulated in floating point: weights and activations are
//! quantized to an unsigned code grid `[0, 2^bits − 1]` and immediately
//! dequantized, so accuracy effects are measured without integer kernels.
//! The real value 0 is always exactly representable: ranges are extended to
//! include 0 before deriving parameters, which keeps padding and ReLU zeros
//! exact. Rounding is half-away-from-zero everywhere. Grid math runs in f64
//! for cross-platform bit-stability.

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::layer::LayerKind;
use crate::model::{Model, PointLocation, TracePoint};
use crate::nonuniform::{nonuniform_quantize, NonUniformCodebook};
use crate::tensor::Tensor;

/// Quantization granularity of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

/// Scale/zero-point pairs for an unsigned affine code grid, either one pair
/// for the whole tensor or one per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineQuantParams {
    pub bits: u8,
    pub granularity: Granularity,
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
}

impl AffineQuantParams {
    pub fn levels(&self) -> i64 {
        (1i64 << self.bits) - 1
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !matches!(bits, 4 | 6 | 8) {
        return Err(Error::Config(format!(
            "unsupported bit width {bits} (expected 4, 6 or 8)"
        )));
    }
    Ok(())
}

/// Per-tensor affine parameters for the value range `[min, max]`.
///
/// The range is extended to include 0, so `zero_point` always lies on the
/// grid and real 0 maps to it exactly. A degenerate all-zero range yields
/// `scale = 1, zero_point = 0`.
pub fn affine_params(min: f32, max: f32, bits: u8) -> Result<AffineQuantParams> {
    check_bits(bits)?;
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::NonFinite(format!("range [{min}, {max}]")));
    }
    if min > max {
        return Err(Error::Config(format!("range min {min} > max {max}")));
    }
    let lo = (min as f64).min(0.0);
    let hi = (max as f64).max(0.0);
    let levels = ((1i64 << bits) - 1) as f64;
    let (scale, zero_point) = if hi == lo {
        (1.0, 0)
    } else {
        // zero point from the ratio directly, avoiding a rounding through scale
        let zp = (-lo * levels / (hi - lo)).round().clamp(0.0, levels) as i32;
        ((hi - lo) / levels, zp)
    };
    Ok(AffineQuantParams {
        bits,
        granularity: Granularity::PerTensor,
        scales: vec![scale],
        zero_points: vec![zero_point],
    })
}

/// Independent per-channel affine parameters along `channel_axis` (the
/// output-channel axis 0 for conv and linear weights).
pub fn per_channel_params(
    weights: &Tensor,
    bits: u8,
    channel_axis: usize,
) -> Result<AffineQuantParams> {
    check_bits(bits)?;
    if weights.rank() < 2 || channel_axis >= weights.rank() {
        return Err(Error::InvalidAxis {
            axis: channel_axis,
            rank: weights.rank(),
        });
    }
    let channels = weights.shape()[channel_axis];
    let mut scales = Vec::with_capacity(channels);
    let mut zero_points = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        weights.for_each_in_slice(channel_axis, c, |x| {
            lo = lo.min(x);
            hi = hi.max(x);
        });
        let p = affine_params(lo, hi, bits)?;
        scales.push(p.scales[0]);
        zero_points.push(p.zero_points[0]);
    }
    Ok(AffineQuantParams {
        bits,
        granularity: Granularity::PerChannel { axis: channel_axis },
        scales,
        zero_points,
    })
}

#[inline]
fn fake_quant_value(x: f32, scale: f64, zero_point: i32, levels: i64) -> f32 {
    let q = (x as f64 / scale).round() + zero_point as f64;
    let q = q.clamp(0.0, levels as f64);
    ((q - zero_point as f64) * scale) as f32
}

/// Quantize-then-dequantize every element under `params`.
pub fn fake_quant(x: &Tensor, params: &AffineQuantParams) -> Result<Tensor> {
    let levels = params.levels();
    match params.granularity {
        Granularity::PerTensor => {
            if params.scales.len() != 1 {
                return Err(Error::ChannelMismatch {
                    params: params.scales.len(),
                    channels: 1,
                });
            }
            Ok(x.map(|v| fake_quant_value(v, params.scales[0], params.zero_points[0], levels)))
        }
        Granularity::PerChannel { axis } => {
            if axis >= x.rank() {
                return Err(Error::InvalidAxis {
                    axis,
                    rank: x.rank(),
                });
            }
            let channels = x.shape()[axis];
            if params.scales.len() != channels {
                return Err(Error::ChannelMismatch {
                    params: params.scales.len(),
                    channels,
                });
            }
            let mut out = x.clone();
            // decompose flat index as (outer, channel, inner)
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let axis_len = channels;
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let c = (i / inner) % axis_len;
                *v = fake_quant_value(*v, params.scales[c], params.zero_points[c], levels);
            }
            Ok(out)
        }
    }
}

/// Mean squared reconstruction error of fake-quantizing `x` under `params`.
pub fn reconstruction_mse(x: &Tensor, params: &AffineQuantParams) -> Result<f64> {
    let q = fake_quant(x, params)?;
    let sse: f64 = x
        .data()
        .iter()
        .zip(q.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sse / x.len() as f64)
}

// ---------------------------------------------------------------------------
// activation calibration
// ---------------------------------------------------------------------------

/// Observed value range and derived parameters for one recording point.
#[derive(Debug, Clone)]
pub struct CalibrationPoint {
    pub point: TracePoint,
    pub min: f32,
    pub max: f32,
    pub params: AffineQuantParams,
}

/// Per-point activation ranges gathered over a calibration dataset.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub bits: u8,
    pub points: Vec<CalibrationPoint>,
}

/// Running min/max per recording point over all calibration samples, plus
/// per-tensor affine parameters at `activation_bits`.
pub fn calibrate_activations(
    model: &Model,
    calib: &LabeledDataset,
    activation_bits: u8,
) -> Result<Calibration> {
    check_bits(activation_bits)?;
    if calib.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let trace_points = model.trace_points();
    let mut ranges: Vec<(f32, f32)> = vec![(f32::INFINITY, f32::NEG_INFINITY); trace_points.len()];
    for (batch, _) in calib.batches(64) {
        let (_, trace) = model.forward_traced(&batch, true)?;
        debug_assert_eq!(trace.entries.len(), trace_points.len());
        for (i, entry) in trace.entries.iter().enumerate() {
            ranges[i].0 = ranges[i].0.min(entry.min);
            ranges[i].1 = ranges[i].1.max(entry.max);
        }
    }
    let points = trace_points
        .iter()
        .zip(&ranges)
        .map(|(&point, &(min, max))| {
            Ok(CalibrationPoint {
                point,
                min,
                max,
                params: affine_params(min, max, activation_bits)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Calibration {
        bits: activation_bits,
        points,
    })
}

/// Merge two calibration passes over the same model: pointwise min/max union.
/// Equivalent to calibrating on the concatenated data.
pub fn merge_calibrations(a: &Calibration, b: &Calibration) -> Result<Calibration> {
    if a.bits != b.bits || a.points.len() != b.points.len() {
        return Err(Error::LengthMismatch {
            left: a.points.len(),
            right: b.points.len(),
        });
    }
    let points = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(pa, pb)| {
            if pa.point != pb.point {
                return Err(Error::Config("calibrations cover different points".into()));
            }
            let min = pa.min.min(pb.min);
            let max = pa.max.max(pb.max);
            Ok(CalibrationPoint {
                point: pa.point,
                min,
                max,
                params: affine_params(min, max, a.bits)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Calibration {
        bits: a.bits,
        points,
    })
}

// ---------------------------------------------------------------------------
// simulated-quantization model
// ---------------------------------------------------------------------------

/// How one layer's weights were quantized.
#[derive(Debug, Clone)]
pub enum WeightQuant {
    /// 32-bit sentinel: weights untouched.
    PassThrough,
    Affine(AffineQuantParams),
    NonUniform(NonUniformCodebook),
}

#[derive(Debug, Clone)]
pub struct LayerWeightQuant {
    pub layer_index: usize,
    pub kind: LayerKind,
    pub quant: WeightQuant,
}

/// Activation quantizer for one recording point. The stored range is
/// extended to include 0.
#[derive(Debug, Clone)]
pub struct ActivationQuant {
    pub point: TracePoint,
    pub min: f32,
    pub max: f32,
    pub params: AffineQuantParams,
}

/// Which weight-quantization scheme produced a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    PerTensor,
    PerChannel,
    Hybrid,
    NonUniform,
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::PerTensor => "per_tensor",
            SchemeKind::PerChannel => "per_channel",
            SchemeKind::Hybrid => "hybrid",
            SchemeKind::NonUniform => "non_uniform",
        }
    }
}

/// An FP32 model paired with simulated weight and activation quantizers.
/// The base model stays unmodified; the forward pass runs fake-quantized
/// weights and fake-quantizes each recorded activation point.
#[derive(Debug, Clone)]
pub struct QuantModel {
    pub base: Model,
    pub(crate) quantized: Model,
    pub weights: Vec<LayerWeightQuant>,
    pub activations: Vec<ActivationQuant>,
    pub weight_bits: u8,
    pub activation_bits: u8,
    pub scheme: SchemeKind,
}

/// Per-layer granularity choice used when building a quantized model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SchemeLabel {
    Pt,
    Pc,
}

/// Quantize one weight tensor under a granularity label.
pub fn quantize_weight(
    weight: &Tensor,
    label: SchemeLabel,
    bits: u8,
) -> Result<(Tensor, AffineQuantParams)> {
    let params = match label {
        SchemeLabel::Pt => affine_params(weight.min(), weight.max(), bits)?,
        SchemeLabel::Pc => per_channel_params(weight, bits, 0)?,
    };
    Ok((fake_quant(weight, &params)?, params))
}

/// The 32-bit sentinel disables a quantization stage entirely.
pub const PASS_THROUGH_BITS: u8 = 32;

/// Build a simulated-quantization model.
///
/// `labels` assigns PT or PC to every quantizable layer (by position in
/// `model.quantizable_layers()`); `calibration` must cover every recording
/// point unless `activation_bits` is the 32-bit sentinel. `weight_bits` of
/// 32 leaves weights untouched.
pub fn build_quant_model(
    model: &Model,
    labels: &[(usize, SchemeLabel)],
    calibration: Option<&Calibration>,
    weight_bits: u8,
    activation_bits: u8,
) -> Result<QuantModel> {
    let mut quantized = model.clone();
    let mut weights = Vec::new();

    if weight_bits != PASS_THROUGH_BITS {
        check_bits(weight_bits)?;
        for &qi in &model.quantizable_layers() {
            let label = labels
                .iter()
                .find(|(i, _)| *i == qi)
                .map(|(_, l)| *l)
                .ok_or(Error::IncompleteAssignment(qi))?;
            let layer = &mut quantized.layers[qi];
            let kind = layer.kind();
            let weight = layer.weight_mut().expect("quantizable layer has weights");
            let (fq, params) = quantize_weight(weight, label, weight_bits)?;
            *weight = fq;
            weights.push(LayerWeightQuant {
                layer_index: qi,
                kind,
                quant: WeightQuant::Affine(params),
            });
        }
    } else {
        for &qi in &model.quantizable_layers() {
            weights.push(LayerWeightQuant {
                layer_index: qi,
                kind: model.layers[qi].kind(),
                quant: WeightQuant::PassThrough,
            });
        }
    }

    let activations = build_activation_quants(model, calibration, activation_bits)?;
    let scheme = scheme_of_labels(labels);
    Ok(QuantModel {
        base: model.clone(),
        quantized,
        weights,
        activations,
        weight_bits,
        activation_bits,
        scheme,
    })
}

/// Build a simulated-quantization model with per-tensor non-uniform
/// (IQR-clustered) weights.
pub fn build_nonuniform_quant_model(
    model: &Model,
    calibration: Option<&Calibration>,
    weight_bits: u8,
    activation_bits: u8,
) -> Result<QuantModel> {
    let mut quantized = model.clone();
    let mut weights = Vec::new();
    if weight_bits != PASS_THROUGH_BITS {
        check_bits(weight_bits)?;
        for &qi in &model.quantizable_layers() {
            let layer = &mut quantized.layers[qi];
            let kind = layer.kind();
            let weight = layer.weight_mut().expect("quantizable layer has weights");
            let (codebook, fq) = nonuniform_quantize(weight, weight_bits)?;
            *weight = fq;
            weights.push(LayerWeightQuant {
                layer_index: qi,
                kind,
                quant: WeightQuant::NonUniform(codebook),
            });
        }
    } else {
        for &qi in &model.quantizable_layers() {
            weights.push(LayerWeightQuant {
                layer_index: qi,
                kind: model.layers[qi].kind(),
                quant: WeightQuant::PassThrough,
            });
        }
    }
    let activations = build_activation_quants(model, calibration, activation_bits)?;
    Ok(QuantModel {
        base: model.clone(),
        quantized,
        weights,
        activations,
        weight_bits,
        activation_bits,
        scheme: SchemeKind::NonUniform,
    })
}

fn build_activation_quants(
    model: &Model,
    calibration: Option<&Calibration>,
    activation_bits: u8,
) -> Result<Vec<ActivationQuant>> {
    if activation_bits == PASS_THROUGH_BITS {
        return Ok(Vec::new());
    }
    check_bits(activation_bits)?;
    let calibration = calibration.ok_or(Error::IncompleteRanges(0))?;
    let trace_points = model.trace_points();
    trace_points
        .iter()
        .enumerate()
        .map(|(i, &point)| {
            let cp = calibration
                .points
                .iter()
                .find(|cp| cp.point == point)
                .ok_or(Error::IncompleteRanges(i))?;
            Ok(ActivationQuant {
                point,
                min: cp.min.min(0.0),
                max: cp.max.max(0.0),
                params: affine_params(cp.min, cp.max, activation_bits)?,
            })
        })
        .collect()
}

fn scheme_of_labels(labels: &[(usize, SchemeLabel)]) -> SchemeKind {
    let any_pt = labels.iter().any(|(_, l)| *l == SchemeLabel::Pt);
    let any_pc = labels.iter().any(|(_, l)| *l == SchemeLabel::Pc);
    match (any_pt, any_pc) {
        (true, false) | (false, false) => SchemeKind::PerTensor,
        (false, true) => SchemeKind::PerChannel,
        (true, true) => SchemeKind::Hybrid,
    }
}

impl QuantModel {
    pub fn class_count(&self) -> usize {
        self.base.class_count
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.base.input_shape
    }

    /// The model actually executed (fake-quantized weights).
    pub fn quantized_model(&self) -> &Model {
        &self.quantized
    }

    /// Forward pass with simulated weight and activation quantization.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        if self.activations.is_empty() {
            return self.quantized.forward(batch);
        }
        let mut cursor = 0usize;
        let mut current = batch.clone();
        for (i, layer) in self.quantized.layers.iter().enumerate() {
            if let Some(aq) = self.activation_at(&mut cursor, i, PointLocation::BnInput) {
                current = fake_quant(&current, &aq.params)?;
            }
            current = layer.forward(&current)?;
            if let Some(aq) = self.activation_at(&mut cursor, i, PointLocation::ActOutput) {
                current = fake_quant(&current, &aq.params)?;
            }
        }
        Ok(current)
    }

    fn activation_at(
        &self,
        cursor: &mut usize,
        layer_index: usize,
        location: PointLocation,
    ) -> Option<&ActivationQuant> {
        let aq = self.activations.get(*cursor)?;
        if aq.point.layer_index == layer_index && aq.point.location == location {
            *cursor += 1;
            Some(aq)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::LayerSpec;

    #[test]
    fn affine_params_symmetric_range() {
        let p = affine_params(-1.0, 1.0, 8).unwrap();
        assert!((p.scales[0] - 2.0 / 255.0).abs() < 1e-12);
        assert_eq!(p.zero_points[0], 128);
    }

    #[test]
    fn affine_params_positive_range() {
        let p = affine_params(0.0, 2.55, 8).unwrap();
        assert!((p.scales[0] - 0.01).abs() < 1e-9);
        assert_eq!(p.zero_points[0], 0);
    }

    #[test]
    fn affine_params_degenerate_zero_range() {
        let p = affine_params(0.0, 0.0, 8).unwrap();
        assert_eq!(p.scales[0], 1.0);
        assert_eq!(p.zero_points[0], 0);
    }

    #[test]
    fn affine_params_rejects_non_finite() {
        assert!(matches!(
            affine_params(f32::NAN, 1.0, 8),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn fake_quant_known_code() {
        // x=0.5 under scale 2/255, zp 128 -> code 192 -> 128/255
        let p = affine_params(-1.0, 1.0, 8).unwrap();
        let x = Tensor::scalar_1d(&[0.5]);
        let q = fake_quant(&x, &p).unwrap();
        assert!((q.data()[0] as f64 - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn fake_quant_grid_values_unchanged() {
        let p = affine_params(-1.0, 1.0, 8).unwrap();
        // any grid value (k - zp) * scale maps to itself
        for k in [0i64, 1, 64, 128, 200, 255] {
            let v = ((k - 128) as f64 * p.scales[0]) as f32;
            let q = fake_quant(&Tensor::scalar_1d(&[v]), &p).unwrap();
            assert_eq!(q.data()[0], v);
        }
    }

    #[test]
    fn fake_quant_saturates_to_grid_top() {
        let p = affine_params(-1.0, 1.0, 8).unwrap();
        let q = fake_quant(&Tensor::scalar_1d(&[100.0]), &p).unwrap();
        let expected = ((255 - 128) as f64 * p.scales[0]) as f32;
        assert_eq!(q.data()[0], expected);
    }

    #[test]
    fn fake_quant_exact_zero() {
        for (lo, hi) in [(-1.0f32, 1.0f32), (-0.3, 2.7), (0.0, 5.0), (-4.0, 0.0)] {
            let p = affine_params(lo, hi, 8).unwrap();
            let q = fake_quant(&Tensor::scalar_1d(&[0.0]), &p).unwrap();
            assert_eq!(q.data()[0], 0.0);
        }
    }

    #[test]
    fn per_channel_scales_follow_channel_ranges() {
        let w = Tensor::new(vec![2, 2], vec![-1.0, 1.0, -0.01, 0.01]).unwrap();
        let p = per_channel_params(&w, 8, 0).unwrap();
        assert!((p.scales[0] - 2.0 / 255.0).abs() < 1e-12);
        // channel bounds are f32, so compare at f32 precision
        assert!((p.scales[1] - 0.02 / 255.0).abs() < 1e-9);
        assert!((p.scales[0] / p.scales[1] - 100.0).abs() < 1e-4);
    }

    #[test]
    fn single_channel_per_channel_equals_per_tensor() {
        let w = Tensor::new(vec![1, 4], vec![-0.5, 0.25, 0.75, -0.1]).unwrap();
        let pt = affine_params(w.min(), w.max(), 8).unwrap();
        let pc = per_channel_params(&w, 8, 0).unwrap();
        assert_eq!(pt.scales[0], pc.scales[0]);
        assert_eq!(pt.zero_points[0], pc.zero_points[0]);
        assert_eq!(
            fake_quant(&w, &pt).unwrap().data(),
            fake_quant(&w, &pc).unwrap().data()
        );
    }

    #[test]
    fn channel_mismatch_detected() {
        let p = AffineQuantParams {
            bits: 8,
            granularity: Granularity::PerChannel { axis: 0 },
            scales: vec![0.1; 3],
            zero_points: vec![0; 3],
        };
        let x = Tensor::zeros(vec![2, 4]);
        assert!(matches!(
            fake_quant(&x, &p),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    fn relu_model() -> Model {
        Model {
            name: "m".into(),
            input_shape: vec![4],
            class_count: 2,
            layers: vec![
                LayerSpec::Linear {
                    weight: Tensor::new(
                        vec![4, 4],
                        (0..16).map(|i| (i as f32 - 8.0) * 0.1).collect(),
                    )
                    .unwrap(),
                    bias: Tensor::zeros(vec![4]),
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    weight: Tensor::new(
                        vec![2, 4],
                        (0..8).map(|i| (i as f32 - 4.0) * 0.2).collect(),
                    )
                    .unwrap(),
                    bias: Tensor::zeros(vec![2]),
                },
            ],
        }
    }

    fn calib_data() -> LabeledDataset {
        let samples = Tensor::new(
            vec![6, 4],
            (0..24)
                .map(|i| ((i * 17 % 13) as f32 - 6.0) * 0.3)
                .collect(),
        )
        .unwrap();
        LabeledDataset::new(
            samples,
            vec![0, 1, 0, 1, 0, 1],
            crate::dataset::Provenance::Synthetic,
            0,
        )
        .unwrap()
    }

    #[test]
    fn calibration_covers_post_relu_with_zero_floor() {
        let model = relu_model();
        let cal = calibrate_activations(&model, &calib_data(), 8).unwrap();
        assert_eq!(cal.points.len(), 1);
        let p = &cal.points[0];
        assert_eq!(p.point.location, PointLocation::ActOutput);
        assert!(p.min >= 0.0);
        // zero-inclusion: the derived grid represents 0 exactly
        assert_eq!(p.params.zero_points[0], 0);
    }

    #[test]
    fn single_sample_calibration_equals_observed_range() {
        let model = relu_model();
        let ds = calib_data();
        let one = LabeledDataset::new(ds.sample(2), vec![ds.labels[2]], ds.provenance, 0).unwrap();
        let cal = calibrate_activations(&model, &one, 8).unwrap();
        let relu_out = {
            let h = model.layers[0].forward(&one.samples).unwrap();
            model.layers[1].forward(&h).unwrap()
        };
        assert_eq!(cal.points[0].min, relu_out.min());
        assert_eq!(cal.points[0].max, relu_out.max());
    }

    #[test]
    fn merged_calibration_equals_concatenated() {
        let model = relu_model();
        let ds = calib_data();
        let half_a = LabeledDataset::new(
            Tensor::new(vec![3, 4], ds.samples.data()[0..12].to_vec()).unwrap(),
            ds.labels[0..3].to_vec(),
            ds.provenance,
            0,
        )
        .unwrap();
        let half_b = LabeledDataset::new(
            Tensor::new(vec![3, 4], ds.samples.data()[12..24].to_vec()).unwrap(),
            ds.labels[3..6].to_vec(),
            ds.provenance,
            0,
        )
        .unwrap();
        let merged = merge_calibrations(
            &calibrate_activations(&model, &half_a, 8).unwrap(),
            &calibrate_activations(&model, &half_b, 8).unwrap(),
        )
        .unwrap();
        let full = calibrate_activations(&model, &ds, 8).unwrap();
        for (m, f) in merged.points.iter().zip(&full.points) {
            assert_eq!(m.min, f.min);
            assert_eq!(m.max, f.max);
            assert_eq!(m.params.scales, f.params.scales);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let model = relu_model();
        let ds = calib_data();
        let empty = LabeledDataset {
            samples: Tensor::zeros(vec![1, 4]),
            labels: vec![],
            provenance: ds.provenance,
            seed: 0,
        };
        assert!(matches!(
            calibrate_activations(&model, &empty, 8),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn pass_through_model_is_bit_identical() {
        let model = relu_model();
        let labels: Vec<(usize, SchemeLabel)> = model
            .quantizable_layers()
            .into_iter()
            .map(|i| (i, SchemeLabel::Pt))
            .collect();
        let qm =
            build_quant_model(&model, &labels, None, PASS_THROUGH_BITS, PASS_THROUGH_BITS).unwrap();
        let batch = calib_data().samples;
        let a = model.forward(&batch).unwrap();
        let b = qm.forward(&batch).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn quantized_model_preserves_base_weights() {
        let model = relu_model();
        let labels: Vec<(usize, SchemeLabel)> = model
            .quantizable_layers()
            .into_iter()
            .map(|i| (i, SchemeLabel::Pc))
            .collect();
        let cal = calibrate_activations(&model, &calib_data(), 8).unwrap();
        let qm = build_quant_model(&model, &labels, Some(&cal), 8, 8).unwrap();
        assert_eq!(qm.base, model);
        assert_eq!(qm.scheme, SchemeKind::PerChannel);
        // quantized weights differ from base (generic weights are off-grid)
        assert_ne!(
            qm.quantized_model().layers[0].weight().unwrap().data(),
            model.layers[0].weight().unwrap().data()
        );
    }

    #[test]
    fn missing_assignment_is_an_error() {
        let model = relu_model();
        let labels = vec![(0usize, SchemeLabel::Pt)]; // second linear missing
        let cal = calibrate_activations(&model, &calib_data(), 8).unwrap();
        assert!(matches!(
            build_quant_model(&model, &labels, Some(&cal), 8, 8),
            Err(Error::IncompleteAssignment(2))
        ));
    }
}
