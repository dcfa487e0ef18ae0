//! Dense tensors, a reverse-mode tape and a finite-difference checker.

mod fd;
mod params;
mod tape;
mod tensor;

pub use fd::finite_diff_check;
pub use params::ParamStore;
pub use tape::{Gradients, ParamVars, Tape, Var};
pub use tensor::{cosine, dot, l2_normalize, norm, sigmoid, softmax, Tensor};

/// Added to the norm before dividing in every L2 normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0}: no input elements")]
    EmptyInput(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable is not recorded on this tape")]
    UntrackedNode,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("objective returned a non-finite value ({0}) at parameter `{1}`")]
    NonFinite(f64, String),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}
