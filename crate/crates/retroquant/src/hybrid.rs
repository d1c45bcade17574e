//! Hybrid per-tensor/per-channel quantization driven by per-layer KL
//! sensitivity.
//!
//! For every quantizable layer an auxiliary model is built with only that
//! layer's weights fake-quantized (activations and every other layer stay
//! FP32), once per granularity. The layer's sensitivity under a granularity
//! is the mean KL divergence between the FP32 model's softmax outputs and
//! the auxiliary model's, over a calibration dataset. Layers whose
//! per-tensor penalty exceeds the per-channel penalty by at least the
//! threshold are assigned per-channel; everything else stays per-tensor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::layer::{LayerKind, LayerSpec};
use crate::model::Model;
use crate::quant::{quantize_weight, SchemeLabel};
use crate::tensor::Tensor;

/// KL divergence `Σ p·ln(p/q)` in nats, with both distributions clamped to
/// a floor of 1e-12 so zero entries stay finite.
pub fn kld(p: &[f32], q: &[f32]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    const FLOOR: f64 = 1e-12;
    let mut acc = 0.0f64;
    for (&pi, &qi) in p.iter().zip(q) {
        let pi = (pi as f64).max(FLOOR);
        let qi = (qi as f64).max(FLOOR);
        acc += pi * (pi / qi).ln();
    }
    Ok(acc.max(0.0))
}

/// Per-layer outcome of the sensitivity comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerAssignment {
    pub index: usize,
    pub kind: LayerKind,
    pub error_pt: f64,
    pub error_pc: f64,
    pub label: SchemeLabel,
}

/// The full per-layer PT/PC decision for a model at a given threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeAssignment {
    pub threshold: f64,
    pub weight_bits: u8,
    pub layers: Vec<LayerAssignment>,
}

impl SchemeAssignment {
    /// A trivial assignment giving every quantizable layer the same label
    /// (errors recorded as zero).
    pub fn uniform(model: &Model, label: SchemeLabel, weight_bits: u8) -> Self {
        let layers = model
            .quantizable_layers()
            .into_iter()
            .map(|i| LayerAssignment {
                index: i,
                kind: model.layers[i].kind(),
                error_pt: 0.0,
                error_pc: 0.0,
                label,
            })
            .collect();
        Self {
            threshold: f64::NAN,
            weight_bits,
            layers,
        }
    }

    pub fn labels(&self) -> Vec<(usize, SchemeLabel)> {
        self.layers.iter().map(|l| (l.index, l.label)).collect()
    }

    /// CSV rendering with the documented header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,error_pt,error_pc,label\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{}\n",
                l.index,
                l.error_pt,
                l.error_pc,
                match l.label {
                    SchemeLabel::Pt => "PT",
                    SchemeLabel::Pc => "PC",
                }
            ));
        }
        out
    }
}

/// Count the per-channel layers of an assignment:
/// `(pc_count, total, fraction)`. A proxy for the inference-time benefit of
/// keeping most layers per-tensor.
pub fn pc_layer_fraction(assignment: &SchemeAssignment) -> (usize, usize, f64) {
    let total = assignment.layers.len();
    let pc = assignment
        .layers
        .iter()
        .filter(|l| l.label == SchemeLabel::Pc)
        .count();
    let fraction = if total == 0 {
        0.0
    } else {
        pc as f64 / total as f64
    };
    (pc, total, fraction)
}

/// Softmax class distributions of a model over a dataset, one row per
/// sample, computed in fixed order (batches forwarded in parallel).
fn class_distributions(model: &Model, data: &LabeledDataset) -> Result<Vec<Vec<f32>>> {
    let batches = data.batches(64);
    let outputs: Vec<Tensor> = batches
        .par_iter()
        .map(|(batch, _)| {
            let out = model.forward(batch)?;
            if model.outputs_probabilities() {
                Ok(out)
            } else {
                LayerSpec::Softmax.forward(&out)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let k = model.class_count;
    let mut rows = Vec::with_capacity(data.len());
    for out in outputs {
        for b in 0..out.shape()[0] {
            rows.push(out.data()[b * k..(b + 1) * k].to_vec());
        }
    }
    Ok(rows)
}

fn mean_kld(base: &[Vec<f32>], aux: &[Vec<f32>]) -> Result<f64> {
    let mut acc = 0.0f64;
    for (p, q) in base.iter().zip(aux) {
        acc += kld(p, q)?;
    }
    Ok(acc / base.len() as f64)
}

/// Build the auxiliary model with only layer `i`'s weights quantized.
fn aux_model(model: &Model, i: usize, label: SchemeLabel, bits: u8) -> Result<Model> {
    let mut aux = model.clone();
    let layer = aux.layers.get_mut(i).ok_or(Error::NotQuantizable(i))?;
    let weight = layer.weight_mut().ok_or(Error::NotQuantizable(i))?;
    let (fq, _) = quantize_weight(weight, label, bits)?;
    *weight = fq;
    Ok(aux)
}

fn sensitivity_vs_base(
    model: &Model,
    base: &[Vec<f32>],
    calib: &LabeledDataset,
    i: usize,
    label: SchemeLabel,
    bits: u8,
) -> Result<f64> {
    let aux = aux_model(model, i, label, bits)?;
    let aux_rows = class_distributions(&aux, calib)?;
    mean_kld(base, &aux_rows)
}

/// Sensitivity of layer `i` to weight quantization under one granularity:
/// mean KL divergence between FP32 and single-layer-quantized softmax
/// outputs over the calibration data.
pub fn layer_sensitivity(
    model: &Model,
    layer_index: usize,
    label: SchemeLabel,
    calib: &LabeledDataset,
    bits: u8,
) -> Result<f64> {
    if calib.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let base = class_distributions(model, calib)?;
    sensitivity_vs_base(model, &base, calib, layer_index, label, bits)
}

/// Per-layer sensitivity values for one granularity, ordered by layer
/// index over the quantizable layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub scheme: SchemeLabel,
    pub bits: u8,
    pub layer_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SensitivityProfile {
    /// Euclidean distance between two profiles of equal length.
    pub fn l2_distance(&self, other: &SensitivityProfile) -> Result<f64> {
        if self.values.len() != other.values.len() {
            return Err(Error::LengthMismatch {
                left: self.values.len(),
                right: other.values.len(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

/// Sensitivity of every quantizable layer under one granularity.
pub fn sensitivity_profile(
    model: &Model,
    calib: &LabeledDataset,
    label: SchemeLabel,
    bits: u8,
) -> Result<SensitivityProfile> {
    if calib.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let base = class_distributions(model, calib)?;
    let indices = model.quantizable_layers();
    let values = indices
        .par_iter()
        .map(|&i| sensitivity_vs_base(model, &base, calib, i, label, bits))
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityProfile {
        scheme: label,
        bits,
        layer_indices: indices,
        values,
    })
}

/// Assign PT or PC to every quantizable layer by thresholded sensitivity
/// difference: PT when `error_pt − error_pc < threshold`, PC otherwise
/// (equality goes to PC).
pub fn hybrid_assign(
    model: &Model,
    calib: &LabeledDataset,
    threshold: f64,
    bits: u8,
) -> Result<SchemeAssignment> {
    if calib.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if threshold.is_nan() {
        return Err(Error::Config("threshold must not be NaN".into()));
    }
    let base = class_distributions(model, calib)?;
    let layers = model
        .quantizable_layers()
        .into_par_iter()
        .map(|i| {
            let error_pt = sensitivity_vs_base(model, &base, calib, i, SchemeLabel::Pt, bits)?;
            let error_pc = sensitivity_vs_base(model, &base, calib, i, SchemeLabel::Pc, bits)?;
            let label = if error_pt - error_pc < threshold {
                SchemeLabel::Pt
            } else {
                SchemeLabel::Pc
            };
            Ok(LayerAssignment {
                index: i,
                kind: model.layers[i].kind(),
                error_pt,
                error_pc,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SchemeAssignment {
        threshold,
        weight_bits: bits,
        layers,
    })
}
