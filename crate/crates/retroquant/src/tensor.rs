//! Dense row-major f32 tensor and per-channel statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense multi-dimensional array of 32-bit floats, stored flat in row-major
/// order. The universal numeric carrier for inputs, parameters and
/// activations.
///
/// Invariants: `data.len() == shape.iter().product()` and all elements are
/// finite after any public operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from a shape and flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "zero dimension in shape {shape:?}"
            )));
        }
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                expected
            )));
        }
        if let Some(x) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {x}")));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor without the finiteness check, for kernel
    /// outputs. Divergence is detected at the loss level instead of
    /// panicking mid-kernel.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar_1d(values: &[f32]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Reinterpret the flat data under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) into {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Global mean and population standard deviation over all elements.
    pub fn global_stats(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&x| {
                let d = x as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }

    pub fn min(&self) -> f32 {
        self.data.iter().cloned().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Number of elements in one slice along `axis`.
    fn slice_stride(&self, axis: usize) -> (usize, usize, usize) {
        // decompose indices as (outer, axis, inner)
        let outer: usize = self.shape[..axis].iter().product();
        let axis_len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        (outer, axis_len, inner)
    }

    /// Visit every element belonging to slice `c` along `axis`.
    pub fn for_each_in_slice(&self, axis: usize, c: usize, mut f: impl FnMut(f32)) {
        let (outer, axis_len, inner) = self.slice_stride(axis);
        for o in 0..outer {
            let base = (o * axis_len + c) * inner;
            for x in &self.data[base..base + inner] {
                f(*x);
            }
        }
    }
}

/// Per-channel mean and population standard deviation of an activation
/// tensor. Mirrors the statistics stored in batch-norm layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Per-channel mean and population std over all axes other than `channel_axis`.
pub fn channel_stats(activation: &Tensor, channel_axis: usize) -> Result<ChannelStats> {
    if activation.rank() < 2 || channel_axis >= activation.rank() {
        return Err(Error::InvalidAxis {
            axis: channel_axis,
            rank: activation.rank(),
        });
    }
    let channels = activation.shape()[channel_axis];
    let per_channel = activation.len() / channels;
    let mut mean = Vec::with_capacity(channels);
    let mut std = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut sum = 0.0f64;
        activation.for_each_in_slice(channel_axis, c, |x| sum += x as f64);
        let m = sum / per_channel as f64;
        let mut sq = 0.0f64;
        activation.for_each_in_slice(channel_axis, c, |x| {
            let d = x as f64 - m;
            sq += d * d;
        });
        mean.push(m as f32);
        std.push((sq / per_channel as f64).sqrt() as f32);
    }
    Ok(ChannelStats { mean, std })
}
