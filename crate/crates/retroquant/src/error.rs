use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid layer parameter: {0}")]
    InvalidLayerParam(String),

    #[error("layer has no backward rule: {0}")]
    UnsupportedLayer(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("format error: {0}")]
    FormatError(String),

    #[error("trace mismatch: expected {expected} entries, got {got}")]
    TraceMismatch { expected: usize, got: usize },

    #[error("loss diverged to a non-finite value{}", class.map(|c| format!(" while generating class {c}")).unwrap_or_default())]
    DivergedLoss { class: Option<usize> },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("per-channel parameter count {params} does not match channel count {channels}")]
    ChannelMismatch { params: usize, channels: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("scheme assignment does not cover layer {0}")]
    IncompleteAssignment(usize),

    #[error("calibration ranges missing for activation point {0}")]
    IncompleteRanges(usize),

    #[error("layer {0} has no quantizable weights")]
    NotQuantizable(usize),

    #[error("empty input")]
    EmptyInput,

    #[error("step budget {budget} is smaller than the number of nonempty clusters {clusters}")]
    BudgetTooSmall { budget: u32, clusters: usize },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::InvalidLayerParam(_) => "InvalidLayerParam",
            Error::UnsupportedLayer(_) => "UnsupportedLayer",
            Error::EmptyBatch => "EmptyBatch",
            Error::InvalidAxis { .. } => "InvalidAxis",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::FormatError(_) => "FormatError",
            Error::TraceMismatch { .. } => "TraceMismatch",
            Error::DivergedLoss { .. } => "DivergedLoss",
            Error::NonFinite(_) => "NonFinite",
            Error::ChannelMismatch { .. } => "ChannelMismatch",
            Error::EmptyDataset => "EmptyDataset",
            Error::IncompleteAssignment(_) => "IncompleteAssignment",
            Error::IncompleteRanges(_) => "IncompleteRanges",
            Error::NotQuantizable(_) => "NotQuantizable",
            Error::EmptyInput => "EmptyInput",
            Error::BudgetTooSmall { .. } => "BudgetTooSmall",
            Error::Diverged { .. } => "Diverged",
            Error::Config(_) => "Config",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
