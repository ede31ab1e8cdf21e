pub mod autodiff;
pub mod beamformer;
pub mod classifier;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
