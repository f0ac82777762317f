//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Block sizes do not sum to the vector length.
    #[error("block sizes sum to {sum}, expected {expected}")]
    SizeMismatch { sum: usize, expected: usize },

    /// A partition block has zero elements.
    #[error("block {index} is empty")]
    EmptyBlock { index: usize },

    /// A gradient vector was constructed from NaN or infinite input.
    #[error("non-finite value at index {index}")]
    NonFiniteValue { index: usize },

    /// Gradient vectors must have at least one element.
    #[error("gradient vectors must be non-empty")]
    EmptyVector,

    /// Sparse compressor asked to keep more elements than exist.
    #[error("k={k} exceeds vector length {len}")]
    KTooLarge { k: usize, len: usize },

    /// An encoded message or frame failed validation.
    #[error("malformed payload at byte {offset}: {reason}")]
    MalformedPayload { offset: usize, reason: String },

    /// Frame version byte is not one we understand.
    #[error("unknown frame version {0}")]
    UnknownVersion(u8),

    /// Frame names a compressor id outside the registry.
    #[error("unknown compressor id {0}")]
    UnknownCompressorId(u8),

    /// Operation is not defined for this compressor kind.
    #[error("operation `{op}` does not support compressor kind {kind}")]
    UnsupportedKind { op: &'static str, kind: String },

    /// Operation requires a nonzero input vector.
    #[error("operation requires a nonzero vector")]
    ZeroVector,

    /// Two vectors that must share a length do not.
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    /// A round saw a different number of workers than configured.
    #[error("worker count mismatch: expected {expected}, got {got}")]
    WorkerCountMismatch { expected: usize, got: usize },

    /// An optimizer update produced NaN or infinity.
    #[error("non-finite optimizer update: {0}")]
    NonFiniteUpdate(&'static str),

    /// Bound evaluation with beta parameters at or past their open-interval limit.
    #[error("degenerate parameters: {0}")]
    DegenerateParams(&'static str),

    /// omega must be nonnegative (or >= 1 for the multiplicative convention).
    #[error("omega {0} out of range")]
    NegativeOmega(f64),

    /// delta must lie in (0, 1].
    #[error("delta {0} outside (0, 1]")]
    DeltaOutOfRange(f64),

    /// Timing inputs to the scaling-efficiency formula must be positive.
    #[error("non-positive time input: {0}")]
    NonPositiveTime(&'static str),

    /// A trajectory monitor needs an exact-gradient problem.
    #[error("problem has no exact gradient oracle")]
    OracleUnavailable,

    /// TCP transport exceeded its deadline.
    #[error("transport timeout: {0}")]
    Timeout(String),

    /// Invalid run or aggregation configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Underlying I/O failure (sockets, files).
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
