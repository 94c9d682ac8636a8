//! Dense two-dimensional numerics with reverse-mode differentiation.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_params, relative_error, ParamCheck};
pub use optim::{adam_update, Adam, CosineSchedule};
pub use params::{Gradients, ParamEntry, ParamGroup, ParamId, ParamStore};
pub use tape::{sigmoid, softmax_rows, softplus, Axis, Tape, Var};
pub use tensor::Tensor;

/// Norm floor for cosine similarity; zero vectors have similarity 0.
pub const COSINE_FLOOR: f64 = 1e-12;
/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward already ran on this tape; reset gradients first")]
    AlreadyBackpropagated,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar([usize; 2]),
    #[error("{0}")]
    Invalid(String),
}
