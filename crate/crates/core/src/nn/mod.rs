//! Dense kernels with analytic gradients: feed-forward stacks, set max-pool,
//! softmax, layer normalization, seeded parameters and gradient checking.

use ndarray::Array2;

mod ffn;
pub mod gradcheck;
pub mod ops;
mod params;

pub use ffn::{Activation, Ffn, FfnCache, FfnSpec};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{layer_norm, linear, maxpool_backward, maxpool_set, softmax_rows, MaxPool};
pub use params::{seeded_init, ParamGrads, ParamStore};

/// Row-major `f64` matrix; rows are set members or tokens.
pub type Matrix = Array2<f64>;
