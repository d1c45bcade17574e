//! Data-free post-training quantization.
//!
//! The crate quantizes a trained FP32 model without touching its training
//! data. Calibration inputs are synthesized from the model itself by
//! gradient descent on a random batch ([`synthesis`]), then used to set
//! activation ranges ([`quant`]). Weight quantization comes in three
//! flavors: plain asymmetric uniform (per-tensor or per-channel), a hybrid
//! per-layer mix driven by KL-divergence sensitivity ([`hybrid`]), and a
//! per-tensor non-uniform scheme that clusters weights by IQR outlier
//! fences and splits the code budget across clusters ([`nonuniform`]).
//! [`harness`] provides desk-scale reference models, synthetic data and
//! evaluation to exercise the whole pipeline.

pub mod dataset;
pub mod error;
pub mod grad;
pub mod harness;
pub mod hybrid;
pub mod io;
pub mod layer;
pub mod model;
pub mod nonuniform;
pub mod optim;
pub mod quant;
pub mod quantfile;
pub mod seed;
pub mod synthesis;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ChannelStats, Tensor};
