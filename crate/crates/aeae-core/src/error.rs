use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    /// Tensor shapes (or feature dimensions) do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Spatial dimensions incompatible with a stride, window or factor.
    #[error("dimension error: {0}")]
    DimensionError(String),

    /// A parameter violates its documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A class index is outside `0..class_count`.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// An operation that needs data received none (or too little).
    #[error("not enough data: {0}")]
    NotEnoughData(String),

    /// `backward` was invoked on a non-scalar node.
    #[error("backward requires a scalar loss, got {elements} elements")]
    NonScalarLoss { elements: usize },

    /// DeepFool could not move: all class-difference gradients vanished.
    #[error("no progress: all class-difference gradients vanished")]
    NoProgress,

    /// A checkpoint byte stream is damaged (truncated, bad digest, garbage).
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// A checkpoint has the wrong magic bytes or an unsupported version.
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),

    /// A probability vector does not sum to 1 within tolerance.
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}
