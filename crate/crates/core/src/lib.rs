pub mod attack;
pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod leakage;
pub mod model;
pub mod selective;
pub mod tensor;

pub use error::{Error, Result};
