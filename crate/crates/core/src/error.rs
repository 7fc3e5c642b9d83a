//! Crate-wide error type.

use alloc::string::String;

/// Errors surfaced by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A configuration field failed validation. Names the offending field.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    /// A vector or matrix had the wrong length for the operation.
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// The schedule's cumulative alpha product vanished at step `t`.
    #[error("singular schedule: alpha_bar is zero at t={t}")]
    SingularSchedule { t: usize },

    /// Reverse step requested at t = 0, which has no previous state.
    #[error("already terminal: t=0 has no previous timestep")]
    AlreadyTerminal,

    /// SVD iteration did not converge for the named block.
    #[error("svd did not converge for block {block} after {sweeps} sweeps")]
    Decomposition { block: usize, sweeps: usize },

    /// Mask space or bit length does not match the expected layout.
    #[error("mask mismatch: {reason}")]
    MaskMismatch { reason: String },

    /// An argument was structurally invalid (empty batch, bad counts, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    /// Cosine distance is undefined for a zero vector.
    #[error("cosine distance undefined: {side} vector has zero norm")]
    ZeroVector { side: &'static str },

    /// A matrix input violated symmetry or definiteness tolerances.
    #[error("matrix error: {0}")]
    Matrix(String),

    /// Token id outside the vocabulary.
    #[error("token id {id} out of vocabulary of size {size}")]
    OutOfVocab { id: usize, size: usize },

    /// Mask cannot be applied to the target model layout.
    #[error("mask transfer failed: {reason}")]
    Transfer { reason: String },

    /// An operation that needs at least one completed-ok trial found none.
    #[error("no trials with ok status")]
    NoOkTrials,
}
