//! On-disk format for simulated-quantization models: the base FP32 model
//! directory plus `quant.json` carrying per-layer quantizer parameters and
//! activation ranges. Floats are stored with 9 significant digits.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sig9, write_atomic};
use crate::layer::LayerKind;
use crate::model::{Model, PointLocation, TracePoint};
use crate::nonuniform::{ClusterGrid, NonUniformCodebook};
use crate::quant::{
    ActivationQuant, AffineQuantParams, Granularity, LayerWeightQuant, QuantModel, SchemeKind,
    WeightQuant, PASS_THROUGH_BITS,
};

pub const QUANT_FORMAT: &str = "retroquant-quant";
pub const QUANT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantFile {
    format: String,
    version: u32,
    scheme: SchemeKind,
    weight_bits: u8,
    activation_bits: u8,
    weights: Vec<WeightEntry>,
    activations: Vec<ActivationEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightEntry {
    layer: usize,
    kind: LayerKind,
    granularity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scales: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    zero_points: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nonuniform: Option<NonUniformCodebook>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActivationEntry {
    layer: usize,
    location: PointLocation,
    min: f64,
    max: f64,
    scale: f64,
    zero_point: i32,
}

fn rounded_codebook(cb: &NonUniformCodebook) -> NonUniformCodebook {
    NonUniformCodebook {
        bits: cb.bits,
        quartiles: cb.quartiles.map(sig9),
        iqr: sig9(cb.iqr),
        fences: cb.fences.map(sig9),
        clusters: cb.clusters.map(|c| {
            c.map(|g| ClusterGrid {
                lo: sig9(g.lo),
                hi: sig9(g.hi),
                steps: g.steps,
                scale: sig9(g.scale),
                zero_point: g.zero_point,
            })
        }),
    }
}

/// Write a quantized model as base model files plus `quant.json`.
pub fn save_quant_model(qm: &QuantModel, dir: &Path) -> Result<()> {
    qm.base.save(dir)?;
    let weights = qm
        .weights
        .iter()
        .map(|w| match &w.quant {
            WeightQuant::PassThrough => WeightEntry {
                layer: w.layer_index,
                kind: w.kind,
                granularity: "pass_through".into(),
                axis: None,
                scales: None,
                zero_points: None,
                nonuniform: None,
            },
            WeightQuant::Affine(p) => {
                let (granularity, axis) = match p.granularity {
                    Granularity::PerTensor => ("per_tensor".to_string(), None),
                    Granularity::PerChannel { axis } => ("per_channel".to_string(), Some(axis)),
                };
                WeightEntry {
                    layer: w.layer_index,
                    kind: w.kind,
                    granularity,
                    axis,
                    scales: Some(p.scales.iter().map(|&s| sig9(s)).collect()),
                    zero_points: Some(p.zero_points.clone()),
                    nonuniform: None,
                }
            }
            WeightQuant::NonUniform(cb) => WeightEntry {
                layer: w.layer_index,
                kind: w.kind,
                granularity: "non_uniform".into(),
                axis: None,
                scales: None,
                zero_points: None,
                nonuniform: Some(rounded_codebook(cb)),
            },
        })
        .collect();
    let activations = qm
        .activations
        .iter()
        .map(|a| ActivationEntry {
            layer: a.point.layer_index,
            location: a.point.location,
            min: sig9(a.min as f64),
            max: sig9(a.max as f64),
            scale: sig9(a.params.scales[0]),
            zero_point: a.params.zero_points[0],
        })
        .collect();
    let file = QuantFile {
        format: QUANT_FORMAT.to_string(),
        version: QUANT_VERSION,
        scheme: qm.scheme,
        weight_bits: qm.weight_bits,
        activation_bits: qm.activation_bits,
        weights,
        activations,
    };
    write_atomic(
        &dir.join("quant.json"),
        serde_json::to_string_pretty(&file)?.as_bytes(),
    )?;
    Ok(())
}

/// Load a quantized model: read the base FP32 model and re-apply the stored
/// quantizers to its weights.
pub fn load_quant_model(dir: &Path) -> Result<QuantModel> {
    let base = Model::load(dir)?;
    let text = fs::read_to_string(dir.join("quant.json"))?;
    let file: QuantFile =
        serde_json::from_str(&text).map_err(|e| Error::FormatError(format!("quant.json: {e}")))?;
    if file.format != QUANT_FORMAT {
        return Err(Error::FormatError(format!(
            "unexpected format tag {:?}",
            file.format
        )));
    }
    if file.version > QUANT_VERSION {
        return Err(Error::FormatError(format!(
            "quant version {} is newer than supported version {}",
            file.version, QUANT_VERSION
        )));
    }

    let mut quantized = base.clone();
    let mut weights = Vec::with_capacity(file.weights.len());
    for entry in &file.weights {
        let layer = quantized
            .layers
            .get_mut(entry.layer)
            .ok_or_else(|| Error::FormatError(format!("weight entry for layer {}", entry.layer)))?;
        let weight = layer
            .weight_mut()
            .ok_or_else(|| Error::FormatError(format!("layer {} has no weights", entry.layer)))?;
        let quant = match entry.granularity.as_str() {
            "pass_through" => WeightQuant::PassThrough,
            "per_tensor" | "per_channel" => {
                let scales = entry
                    .scales
                    .clone()
                    .ok_or_else(|| Error::FormatError("missing scales".into()))?;
                let zero_points = entry
                    .zero_points
                    .clone()
                    .ok_or_else(|| Error::FormatError("missing zero_points".into()))?;
                let granularity = if entry.granularity == "per_tensor" {
                    Granularity::PerTensor
                } else {
                    Granularity::PerChannel {
                        axis: entry.axis.unwrap_or(0),
                    }
                };
                let params = AffineQuantParams {
                    bits: file.weight_bits,
                    granularity,
                    scales,
                    zero_points,
                };
                *weight = crate::quant::fake_quant(weight, &params)?;
                WeightQuant::Affine(params)
            }
            "non_uniform" => {
                let cb = entry
                    .nonuniform
                    .clone()
                    .ok_or_else(|| Error::FormatError("missing nonuniform block".into()))?;
                *weight = cb.apply(weight);
                WeightQuant::NonUniform(cb)
            }
            other => return Err(Error::FormatError(format!("unknown granularity {other:?}"))),
        };
        weights.push(LayerWeightQuant {
            layer_index: entry.layer,
            kind: entry.kind,
            quant,
        });
    }

    let activations = if file.activation_bits == PASS_THROUGH_BITS {
        Vec::new()
    } else {
        let points = base.trace_points();
        file.activations
            .iter()
            .map(|a| {
                let point = TracePoint {
                    layer_index: a.layer,
                    location: a.location,
                };
                if !points.contains(&point) {
                    return Err(Error::FormatError(format!(
                        "activation entry for unknown point at layer {}",
                        a.layer
                    )));
                }
                Ok(ActivationQuant {
                    point,
                    min: a.min as f32,
                    max: a.max as f32,
                    params: AffineQuantParams {
                        bits: file.activation_bits,
                        granularity: Granularity::PerTensor,
                        scales: vec![a.scale],
                        zero_points: vec![a.zero_point],
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?
    };

    Ok(QuantModel {
        base,
        quantized,
        weights,
        activations,
        weight_bits: file.weight_bits,
        activation_bits: file.activation_bits,
        scheme: file.scheme,
    })
}
