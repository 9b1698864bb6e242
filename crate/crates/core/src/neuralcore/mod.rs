//! Minimal dense-tensor reverse-mode autodiff and the layers the emotion
//! models are built from.

mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod tensor;

use thiserror::Error;

pub use gradcheck::{compare_gradients, grad_check, rel_error, GradCheckOptions, GradCheckReport};
pub use graph::{sigmoid, softmax_in_place, Gradients, Graph, Mode, StatUpdate, Var};
pub use params::{
    read_checkpoint_entries, Buffer, BufferId, CheckpointEntry, ParamGroup, ParamId, ParamStore,
    Parameter, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NnError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NnError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        NnError::Invalid {
            op,
            detail: detail.into(),
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, NnError::NonFinite { .. })
    }
}

/// Mean negative log-likelihood of `targets` under probability rows,
/// clamped at zero.
pub fn cross_entropy(probs: &Tensor, targets: &[usize]) -> Result<f64, NnError> {
    let (n, k) = probs
        .dims2()
        .ok_or_else(|| NnError::shape("cross_entropy", "expected a matrix"))?;
    if targets.len() != n {
        return Err(NnError::shape("cross_entropy", "one target per row required"));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(NnError::TargetOutOfRange { target: t, classes: k });
        }
        total -= probs.get(r, t).max(f64::MIN_POSITIVE).ln();
    }
    Ok((total / n as f64).max(0.0))
}
