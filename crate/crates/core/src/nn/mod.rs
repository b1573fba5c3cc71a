//! Minimal dense tensor math with reverse-mode differentiation.
//!
//! A [`Tape`] records the forward graph per evaluation (episode graphs
//! change shape every step, so there is no static graph). Parameters live
//! in a [`ParamStore`]; [`Tape::backward`] computes exact gradients and
//! accumulates them into the store in recording order, which keeps
//! repeated runs bit-identical.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use params::ParamStore;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("non-finite output of {0}")]
    NonFinite(&'static str),
    #[error("softmax mask has no valid entry")]
    EmptyMask,
    #[error("no parameter named {0:?}")]
    UnknownParam(String),
    #[error("backward called before any gradients were produced")]
    GradsMissing,
}

/// Batch-norm epsilon, matching the usual framework default.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum: `running = (1 - m) * running + m * batch`.
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether batch norm uses batch statistics (training) or running ones.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}
