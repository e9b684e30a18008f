//! Differentiable dense linear algebra: tensors, the reverse-mode tape,
//! parameter storage, Adam and finite-difference gradient checking.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{gradcheck, relative_error, GradcheckOptions, GradcheckReport, ParamCheck, FD_STEP};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, softplus, Gradients, SparseMix, Tape, TemporalGeometry, Var};
pub use tensor::{cosine, dot, norm, softmax, Tensor};

/// Vectors with a norm below this are rejected by cosine similarity.
pub const DEGENERATE_NORM: f64 = 1e-12;
