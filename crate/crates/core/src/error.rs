//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("unsupported store version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("neuron index {index} out of range (d_ffn = {d_ffn})")]
    IndexOutOfRange { index: u32, d_ffn: u32 },

    #[error("layer {layer} out of range (n_layers = {n_layers})")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("short read: wanted {wanted} bytes at offset {offset}, got {got}")]
    ShortRead { offset: u64, wanted: u64, got: u64 },

    #[error("direct i/o unavailable: {0}")]
    DirectIoUnsupported(String),

    #[error("file too small: need at least {needed} bytes, file has {actual}")]
    FileTooSmall { needed: u64, actual: u64 },

    #[error("degenerate labels in layer {layer}: {detail}")]
    DegenerateLabels { layer: usize, detail: String },

    #[error("cache capacity overflow: window union needs {needed} rows, capacity is {capacity}")]
    CapacityOverflow { needed: usize, capacity: usize },

    #[error("degenerate throughput grid: {0}")]
    DegenerateGrid(String),

    #[error("empty trace")]
    EmptyTrace,

    #[error("window length {k} exceeds trace length {tokens}")]
    WindowTooLong { k: usize, tokens: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad trace file: {0}")]
    BadTrace(String),
}
