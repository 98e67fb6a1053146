pub mod archive;
pub mod backbone;
pub mod diffmath;
pub mod disentangler;
pub mod error;
pub mod evalsuite;
pub mod explainer;
pub mod gradcheck;
pub mod splat_io;
pub mod trainer;

pub use error::{Error, Result};
