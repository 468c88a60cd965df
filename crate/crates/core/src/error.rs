use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("file too small to hold the 8-byte header length")]
    TruncatedPrefix,

    #[error("header overruns file: declared {declared} bytes, {available} available")]
    HeaderOverrun { declared: u64, available: u64 },

    #[error("malformed header JSON: {0}")]
    HeaderJson(String),

    #[error("tensor '{tensor}': malformed header entry: {reason}")]
    HeaderEntry { tensor: String, reason: String },

    #[error("tensor '{tensor}': unknown dtype '{dtype}'")]
    UnknownDType { tensor: String, dtype: String },

    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),

    #[error("tensor '{tensor}': data_offsets [{begin}, {end}] out of bounds (data region is {len} bytes)")]
    OutOfBounds {
        tensor: String,
        begin: u64,
        end: u64,
        len: u64,
    },

    #[error("tensor '{tensor}': overlapping regions with '{other}'")]
    Overlapping { tensor: String, other: String },

    #[error("tensor '{tensor}': region holds {actual} bytes, shape and dtype require {expected}")]
    SizeMismatch {
        tensor: String,
        expected: usize,
        actual: usize,
    },

    #[error("tensor '{tensor}': invalid shape {shape:?}")]
    InvalidShape { tensor: String, shape: Vec<usize> },

    #[error("tensor name must be nonempty")]
    EmptyName,

    #[error("tensor '{tensor}' contains non-finite values")]
    NonFinite { tensor: String },

    #[error("tensor '{tensor}' is not a matrix (shape {shape:?})")]
    NotMatrix { tensor: String, shape: Vec<usize> },

    #[error("shape mismatch{}: {left:?} vs {right:?}", fmt_ctx(.context))]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("layer '{0}' missing from checkpoint")]
    MissingLayer(String),

    #[error("layer '{tensor}' dtype differs between checkpoints")]
    DTypeMismatch { tensor: String },

    #[error("layer '{0}' targeted by more than one adapter")]
    DuplicateAdapter(String),

    #[error("adapter for '{0}' is missing its lora_A or lora_B half")]
    IncompleteAdapter(String),

    #[error("invalid pattern '{pattern}': {reason}")]
    Pattern { pattern: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("similarity table is empty")]
    EmptyTable,

    #[error("merge plan does not match the mergeable set: {0}")]
    PlanMismatch(String),

    #[error("rotation matrix is not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),

    #[error("degenerate bounding box {0:?}")]
    DegenerateBox([i64; 4]),

    #[error("non-finite angle value")]
    NonFiniteAngle,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("duplicate manifest id '{0}'")]
    DuplicateId(String),
}

fn fmt_ctx(ctx: &str) -> String {
    if ctx.is_empty() {
        String::new()
    } else {
        format!(" in {ctx}")
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::TruncatedPrefix | Error::HeaderOverrun { .. } => "header_overrun",
            Error::HeaderJson(_) | Error::HeaderEntry { .. } => "header_json",
            Error::UnknownDType { .. } => "unknown_dtype",
            Error::DuplicateName(_) => "duplicate_name",
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::Overlapping { .. } => "overlapping_regions",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::InvalidShape { .. } | Error::EmptyName => "invalid_tensor",
            Error::NonFinite { .. } => "non_finite",
            Error::NotMatrix { .. } => "not_matrix",
            Error::ShapeMismatch { .. } | Error::DTypeMismatch { .. } => "shape_mismatch",
            Error::MissingLayer(_) => "missing_layer",
            Error::DuplicateAdapter(_) | Error::IncompleteAdapter(_) => "adapter",
            Error::Pattern { .. } => "pattern",
            Error::Config(_) => "config",
            Error::EmptyTable => "empty_table",
            Error::PlanMismatch(_) => "plan_mismatch",
            Error::NotOrthonormal(_) => "not_orthonormal",
            Error::DegenerateBox(_) => "degenerate_box",
            Error::NonFiniteAngle => "non_finite",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::DuplicateId(_) => "duplicate_id",
        }
    }
}
