use thiserror::Error;

/// Errors produced by the nmsparse library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(
        "invalid N:M configuration: {kept} kept of {block_len} (need 0 < kept < block_len <= 8)"
    )]
    InvalidConfig { block_len: usize, kept: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("mask violates N:M constraint at row {row}, block {block}: popcount {popcount}, expected {expected}")]
    MaskViolation {
        row: usize,
        block: usize,
        popcount: usize,
        expected: usize,
    },

    #[error("width {cols} is not a multiple of block length {block_len}")]
    Misaligned { cols: usize, block_len: usize },

    #[error("malformed compressed index stream at row {row}, block {block}")]
    MalformedIndices { row: usize, block: usize },

    #[error("kernel dimensions must be odd, got {height}x{width}")]
    EvenKernel { height: usize, width: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("layer index {index} out of range for depth {depth}")]
    InvalidLayer { index: usize, depth: usize },

    #[error("layer {0} has no mask in the requested mode")]
    MissingMask(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error(transparent)]
    Format(#[from] crate::io::FormatError),
}

pub type Result<T> = std::result::Result<T, Error>;
