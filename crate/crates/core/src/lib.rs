//! Causal kernel descent for next-token prediction.
//!
//! Sequences `x_{t+1} = f(x_t)` on the unit sphere are predicted in context by
//! a causal least-squares descent on the predictions. The crate provides the
//! descent and its closed-form fixed point, the projector (Kaczmarz) view of
//! the dual coefficients in Gram coordinates, and explicit causal attention
//! layers whose forward pass reproduces the descent step for step.

pub mod descent;
pub mod error;
pub mod expcli;
pub mod fit;
pub mod kernels;
pub mod linalg;
pub mod rkhs;
pub mod seqgen;
pub mod transformer;

pub use error::{Error, Result};
pub use kernels::{AttentionMatrix, Kernel, Variant};
pub use seqgen::{Instance, Sequence};
