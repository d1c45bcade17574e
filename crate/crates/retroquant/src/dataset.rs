//! Labeled datasets and their on-disk format (`dataset.json` + `data.bin`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "retroquant-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Where a dataset's samples came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Template-blob training/evaluation data.
    Synthetic,
    /// Data generated from the model itself.
    Retro,
    /// Standard normal noise.
    RandomGaussian,
}

/// A batch of labeled samples: tensor `[n] + input_shape` plus one label
/// per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn new(
        samples: Tensor,
        labels: Vec<usize>,
        provenance: Provenance,
        seed: u64,
    ) -> Result<Self> {
        if samples.shape()[0] != labels.len() {
            return Err(Error::LengthMismatch {
                left: samples.shape()[0],
                right: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            samples,
            labels,
            provenance,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    /// Copy out sample `i` as a batch-of-one tensor.
    pub fn sample(&self, i: usize) -> Tensor {
        let per = self.samples.len() / self.len();
        let mut shape = vec![1];
        shape.extend_from_slice(self.sample_shape());
        Tensor::new(shape, self.samples.data()[i * per..(i + 1) * per].to_vec())
            .expect("sample slice")
    }

    /// Split into batches of at most `batch_size` samples, preserving order.
    pub fn batches(&self, batch_size: usize) -> Vec<(Tensor, Vec<usize>)> {
        let per = self.samples.len() / self.len();
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.len() {
            let end = (start + batch_size).min(self.len());
            let mut shape = vec![end - start];
            shape.extend_from_slice(self.sample_shape());
            let t = Tensor::new(shape, self.samples.data()[start * per..end * per].to_vec())
                .expect("batch slice");
            out.push((t, self.labels[start..end].to_vec()));
            start = end;
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = DatasetMeta {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            count: self.len(),
            input_shape: self.sample_shape().to_vec(),
            seed: self.seed,
            provenance: self.provenance,
            labels: self.labels.clone(),
        };
        let mut blob = Vec::with_capacity(self.samples.len() * 4);
        for &v in self.samples.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(
            &dir.join("dataset.json"),
            serde_json::to_string_pretty(&meta)?.as_bytes(),
        )?;
        write_atomic(&dir.join("data.bin"), &blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_text = fs::read_to_string(dir.join("dataset.json"))?;
        let meta: DatasetMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::FormatError(format!("dataset.json: {e}")))?;
        if meta.format != DATASET_FORMAT {
            return Err(Error::FormatError(format!(
                "unexpected format tag {:?}",
                meta.format
            )));
        }
        if meta.version > DATASET_VERSION {
            return Err(Error::FormatError(format!(
                "dataset version {} is newer than supported version {}",
                meta.version, DATASET_VERSION
            )));
        }
        let blob = fs::read(dir.join("data.bin"))?;
        let per: usize = meta.input_shape.iter().product();
        let expected = meta.count * per * 4;
        if blob.len() != expected {
            return Err(Error::FormatError(format!(
                "data.bin holds {} bytes, manifest declares {}",
                blob.len(),
                expected
            )));
        }
        let data: Vec<f32> = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut shape = vec![meta.count];
        shape.extend_from_slice(&meta.input_shape);
        let samples =
            Tensor::new(shape, data).map_err(|e| Error::FormatError(format!("data.bin: {e}")))?;
        LabeledDataset::new(samples, meta.labels, meta.provenance, meta.seed)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    format: String,
    version: u32,
    count: usize,
    input_shape: Vec<usize>,
    seed: u64,
    provenance: Provenance,
    labels: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let samples = Tensor::new(
            vec![3, 2, 2],
            (0..12).map(|i| i as f32 * 0.25 - 1.0).collect(),
        )
        .unwrap();
        let ds = LabeledDataset::new(samples, vec![0, 1, 2], Provenance::Synthetic, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let loaded = LabeledDataset::load(dir.path()).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn short_blob_rejected() {
        let samples = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ds = LabeledDataset::new(samples, vec![0, 1], Provenance::Retro, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let blob = fs::read(dir.path().join("data.bin")).unwrap();
        fs::write(dir.path().join("data.bin"), &blob[..blob.len() - 4]).unwrap();
        assert!(matches!(
            LabeledDataset::load(dir.path()),
            Err(Error::FormatError(_))
        ));
    }

    #[test]
    fn batch_split_preserves_order() {
        let samples = Tensor::new(vec![5, 2], (0..10).map(|i| i as f32).collect()).unwrap();
        let ds =
            LabeledDataset::new(samples, vec![0, 1, 2, 3, 4], Provenance::Synthetic, 0).unwrap();
        let batches = ds.batches(2);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].0.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(batches[2].1, vec![4]);
    }
}
