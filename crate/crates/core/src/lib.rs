//! Group orthogonalization regularization (GOR).
//!
//! Penalizes `Σ_i ‖W_iᵀW_i − I‖_F²` over groups of a layer's filters instead
//! of the whole `C_out×C_out` Gram matrix, cutting the Gram-product cost from
//! `C_out²·C_in` to `C_out²·C_in / N` multiplies.

pub mod autodiff;
pub mod cost;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod grouping;
pub mod kernels;
pub mod model_io;
pub mod nn;
pub mod penalty;
pub mod regularizer;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::Tensor;
