//! Resolved parameter records for each subcommand.
//!
//! Each record merges three layers: built-in defaults, an optional JSON
//! config file (unknown keys rejected), and explicit flags, in that order
//! of precedence (later wins). The resolved record is echoed into the
//! output directory so every run's effective parameters and seeds are on
//! disk, and it round-trips through its JSON form.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use retroquant::error::{Error, Result};
use retroquant::io::write_atomic;

pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

pub fn echo_config<T: Serialize>(params: &T, dir: &Path, name: &str) -> Result<()> {
    write_atomic(
        &dir.join(name),
        serde_json::to_string_pretty(params)?.as_bytes(),
    )
}

/// Explicit flag wins over config file wins over default.
pub fn resolve<T: Copy>(flag: Option<T>, config: T) -> T {
    flag.unwrap_or(config)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub arch: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            arch: "cnn_bn".into(),
            epochs: 6,
            learning_rate: 0.01,
            batch_size: 32,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthDataParams {
    pub classes: usize,
    pub per_class: usize,
    pub shape: Vec<usize>,
    pub role: String,
    pub seed: u64,
}

impl Default for SynthDataParams {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 100,
            shape: vec![1, 16, 16],
            role: "train".into(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub per_class: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weight_bn: f64,
    pub weight_gauss: f64,
    pub weight_class: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            per_class: 32,
            epochs: 500,
            learning_rate: 0.05,
            seed: 42,
            weight_bn: 1.0,
            weight_gauss: 1.0,
            weight_class: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateParams {
    pub activation_bits: u8,
}

impl Default for CalibrateParams {
    fn default() -> Self {
        Self { activation_bits: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizeParams {
    pub scheme: String,
    pub threshold: f64,
    pub weight_bits: u8,
    pub activation_bits: u8,
}

impl Default for QuantizeParams {
    fn default() -> Self {
        Self {
            scheme: "pt".into(),
            threshold: 0.0,
            weight_bits: 8,
            activation_bits: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityParams {
    pub scheme: String,
    pub bits: u8,
}

impl Default for SensitivityParams {
    fn default() -> Self {
        Self {
            scheme: "pc".into(),
            bits: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportParams {
    pub threshold: f64,
    pub weight_bits: u8,
    pub activation_bits: u8,
}

impl Default for ReportParams {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            weight_bits: 8,
            activation_bits: 8,
        }
    }
}

pub fn parse_shape(s: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad shape {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("bad shape {s:?}")));
    }
    Ok(dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips() {
        let p = GenParams {
            per_class: 7,
            seed: 9,
            ..GenParams::default()
        };
        let text = serde_json::to_string(&p).unwrap();
        let back: GenParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back.per_class, 7);
        assert_eq!(back.seed, 9);
        assert_eq!(back.epochs, p.epochs);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = r#"{"per_class": 4, "typo_key": 1}"#;
        assert!(serde_json::from_str::<GenParams>(bad).is_err());
    }

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("1x16x16").unwrap(), vec![1, 16, 16]);
        assert!(parse_shape("0x4").is_err());
        assert!(parse_shape("abc").is_err());
    }
}
