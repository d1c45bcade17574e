//! Sequential model container, instrumented forward pass and on-disk format.
//!
//! A model is an ordered chain of layers. The instrumented forward pass
//! records activation statistics at two kinds of points: the input of every
//! batch-norm layer (matched against that layer's stored running statistics)
//! and the output of every activation function (for range calibration).
//!
//! On disk a model is a directory holding `model.json` (manifest) and
//! `weights.bin` (all parameter tensors concatenated in manifest order,
//! little-endian IEEE-754 f32, row-major).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{LayerKind, LayerSpec};
use crate::tensor::{channel_stats, ChannelStats, Tensor};

pub const MODEL_FORMAT: &str = "retroquant-model";
pub const MODEL_VERSION: u32 = 1;

/// An FP32 model: ordered layers plus input/output metadata. Immutable once
/// built; transformations (training steps, quantization) produce new values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

/// Where an activation recording point sits relative to its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLocation {
    /// The tensor feeding a batch-norm layer.
    BnInput,
    /// The tensor produced by an activation function (ReLU, Softmax).
    ActOutput,
}

/// A designated recording point in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracePoint {
    pub layer_index: usize,
    pub location: PointLocation,
}

/// One recorded entry: channel statistics plus the global value range seen
/// at a trace point during a single forward pass.
#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub point: TracePoint,
    pub stats: ChannelStats,
    pub min: f32,
    pub max: f32,
}

/// Statistics captured by one instrumented forward pass, one entry per
/// recording point in layer order.
#[derive(Debug, Clone, Default)]
pub struct ActivationTrace {
    pub entries: Vec<TraceEntry>,
}

impl ActivationTrace {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries recorded at batch-norm inputs, in layer order.
    pub fn bn_entries(&self) -> impl Iterator<Item = &TraceEntry> {
        self.entries
            .iter()
            .filter(|e| e.point.location == PointLocation::BnInput)
    }
}

impl Model {
    /// Validate layer chain compatibility and the final output arity.
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape.clone();
        shape.insert(0, 1); // probe with batch size 1
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| {
                Error::ShapeMismatch(format!("layer {i} ({}): {e}", layer.kind().name()))
            })?;
        }
        if shape != vec![1, self.class_count] {
            return Err(Error::ShapeMismatch(format!(
                "final layer produces {:?}, expected [n, {}]",
                shape, self.class_count
            )));
        }
        Ok(())
    }

    /// Whether the network's final layer already applies softmax.
    pub fn outputs_probabilities(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Softmax))
    }

    /// The designated recording points, in layer order.
    pub fn trace_points(&self) -> Vec<TracePoint> {
        let mut points = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.kind() {
                LayerKind::BatchNorm => points.push(TracePoint {
                    layer_index: i,
                    location: PointLocation::BnInput,
                }),
                LayerKind::Relu | LayerKind::Softmax => points.push(TracePoint {
                    layer_index: i,
                    location: PointLocation::ActOutput,
                }),
                _ => {}
            }
        }
        points
    }

    /// Indices of layers with quantizable weights (conv, linear).
    pub fn quantizable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_quantizable())
            .map(|(i, _)| i)
            .collect()
    }

    /// Plain forward pass to logits (or probabilities for softmax-terminated
    /// models).
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(batch, false)?.0)
    }

    /// Forward pass that optionally captures activation statistics at every
    /// recording point.
    pub fn forward_traced(
        &self,
        batch: &Tensor,
        capture: bool,
    ) -> Result<(Tensor, ActivationTrace)> {
        if batch.shape().len() != self.input_shape.len() + 1
            || batch.shape()[1..] != self.input_shape[..]
        {
            return Err(Error::ShapeMismatch(format!(
                "batch shape {:?} does not extend input shape {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        let mut trace = ActivationTrace::default();
        let mut current = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if capture && layer.kind() == LayerKind::BatchNorm {
                trace.entries.push(record_entry(
                    TracePoint {
                        layer_index: i,
                        location: PointLocation::BnInput,
                    },
                    &current,
                )?);
            }
            current = layer.forward(&current)?;
            if capture && matches!(layer.kind(), LayerKind::Relu | LayerKind::Softmax) {
                trace.entries.push(record_entry(
                    TracePoint {
                        layer_index: i,
                        location: PointLocation::ActOutput,
                    },
                    &current,
                )?);
            }
        }
        Ok((current, trace))
    }

    /// Total number of parameter scalars, in serialization order.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.param_tensors())
            .map(|t| t.len())
            .sum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_model(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Model> {
        load_model(dir)
    }
}

fn record_entry(point: TracePoint, tensor: &Tensor) -> Result<TraceEntry> {
    // rank-2 tensors (post-flatten) use axis 1 as the channel axis too
    let stats = channel_stats(tensor, 1)?;
    Ok(TraceEntry {
        point,
        stats,
        min: tensor.min(),
        max: tensor.max(),
    })
}

// ---------------------------------------------------------------------------
// on-disk format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    name: String,
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<LayerManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerManifest {
    kind: LayerKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    param_shapes: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
}

fn layer_manifest(layer: &LayerSpec) -> LayerManifest {
    let param_shapes = layer
        .param_tensors()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let (stride, padding, eps, size) = match layer {
        LayerSpec::Conv2d {
            stride, padding, ..
        } => (Some(*stride), Some(*padding), None, None),
        LayerSpec::BatchNorm { eps, .. } => (None, None, Some(*eps), None),
        LayerSpec::MaxPool { size, stride } | LayerSpec::AvgPool { size, stride } => {
            (Some(*stride), None, None, Some(*size))
        }
        _ => (None, None, None, None),
    };
    LayerManifest {
        kind: layer.kind(),
        param_shapes,
        stride,
        padding,
        eps,
        size,
    }
}

/// Write `model.json` + `weights.bin` into `dir` (created if missing).
pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    model.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        name: model.name.clone(),
        input_shape: model.input_shape.clone(),
        class_count: model.class_count,
        layers: model.layers.iter().map(layer_manifest).collect(),
    };
    let mut blob: Vec<u8> = Vec::with_capacity(model.param_count() * 4);
    for layer in &model.layers {
        for t in layer.param_tensors() {
            for &v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    crate::io::write_atomic(
        &dir.join("model.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    crate::io::write_atomic(&dir.join("weights.bin"), &blob)?;
    Ok(())
}

/// Load a model saved by [`save_model`]. Weights round-trip bit-exactly.
pub fn load_model(dir: &Path) -> Result<Model> {
    let manifest_text = fs::read_to_string(dir.join("model.json"))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::FormatError(format!("model.json: {e}")))?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::FormatError(format!(
            "unexpected format tag {:?}",
            manifest.format
        )));
    }
    if manifest.version > MODEL_VERSION {
        return Err(Error::FormatError(format!(
            "model version {} is newer than supported version {}",
            manifest.version, MODEL_VERSION
        )));
    }
    let blob = fs::read(dir.join("weights.bin"))?;
    if blob.len() % 4 != 0 {
        return Err(Error::FormatError(
            "weights.bin length is not a multiple of 4".into(),
        ));
    }
    let mut floats = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));

    let mut take_tensor = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = floats.by_ref().take(n).collect();
        if data.len() != n {
            return Err(Error::FormatError(
                "weights.bin shorter than manifest declares".into(),
            ));
        }
        Tensor::new(shape.to_vec(), data)
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, lm) in manifest.layers.iter().enumerate() {
        let wrong_params = |expected: usize| {
            Error::FormatError(format!(
                "layer {i} ({:?}) declares {} parameter tensors, expected {expected}",
                lm.kind,
                lm.param_shapes.len()
            ))
        };
        let layer = match lm.kind {
            LayerKind::Conv2d => {
                if lm.param_shapes.len() != 2 {
                    return Err(wrong_params(2));
                }
                LayerSpec::Conv2d {
                    weight: take_tensor(&lm.param_shapes[0])?,
                    bias: take_tensor(&lm.param_shapes[1])?,
                    stride: lm.stride.unwrap_or(1),
                    padding: lm.padding.unwrap_or(0),
                }
            }
            LayerKind::Linear => {
                if lm.param_shapes.len() != 2 {
                    return Err(wrong_params(2));
                }
                LayerSpec::Linear {
                    weight: take_tensor(&lm.param_shapes[0])?,
                    bias: take_tensor(&lm.param_shapes[1])?,
                }
            }
            LayerKind::BatchNorm => {
                if lm.param_shapes.len() != 4 {
                    return Err(wrong_params(4));
                }
                LayerSpec::BatchNorm {
                    gamma: take_tensor(&lm.param_shapes[0])?,
                    beta: take_tensor(&lm.param_shapes[1])?,
                    running_mean: take_tensor(&lm.param_shapes[2])?,
                    running_var: take_tensor(&lm.param_shapes[3])?,
                    eps: lm
                        .eps
                        .ok_or_else(|| Error::FormatError(format!("layer {i}: missing eps")))?,
                }
            }
            LayerKind::Relu => LayerSpec::Relu,
            LayerKind::MaxPool => LayerSpec::MaxPool {
                size: lm
                    .size
                    .ok_or_else(|| Error::FormatError(format!("layer {i}: missing size")))?,
                stride: lm.stride.unwrap_or(lm.size.unwrap_or(1)),
            },
            LayerKind::AvgPool => LayerSpec::AvgPool {
                size: lm
                    .size
                    .ok_or_else(|| Error::FormatError(format!("layer {i}: missing size")))?,
                stride: lm.stride.unwrap_or(lm.size.unwrap_or(1)),
            },
            LayerKind::Flatten => LayerSpec::Flatten,
            LayerKind::Softmax => LayerSpec::Softmax,
        };
        layer
            .validate()
            .map_err(|e| Error::FormatError(format!("layer {i}: {e}")))?;
        layers.push(layer);
    }
    if floats.next().is_some() {
        return Err(Error::FormatError(
            "weights.bin longer than manifest declares".into(),
        ));
    }

    let model = Model {
        name: manifest.name,
        input_shape: manifest.input_shape,
        class_count: manifest.class_count,
        layers,
    };
    model
        .validate()
        .map_err(|e| Error::FormatError(format!("loaded model invalid: {e}")))?;
    Ok(model)
}
