//! Dense arrays, the primitive operations the model is assembled from, and a
//! central-difference gradient checker used to verify every hand-written
//! backward pass.

mod array;
mod gradcheck;
pub mod kernels;

pub use array::{cosine_sim, l2_norm, layer_norm, matmul, sigmoid, silu, softmax, Array, Precision};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};

/// Guard added to (or compared against) every norm that ends up in a denominator.
pub const NORM_EPS: f64 = 1e-8;

/// Variance guard for layer and group normalization.
pub const NORM_VAR_EPS: f64 = 1e-5;
