//! Dense matrix numerics with a reverse-mode tape.
//!
//! Everything is a row-major 2-D [`Tensor`]; per-point batches are
//! channel-major (`channels x points`). The same code runs in `f32` for
//! training and `f64` for gradient checks.

mod expm;
pub mod finite_diff;
pub mod linalg;
mod real;
mod tape;
mod tensor;

pub use expm::{norm_one, orthogonality_defect, skew_exp, squaring_steps, SCALED_NORM, TAYLOR_TERMS};
pub use real::Real;
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
