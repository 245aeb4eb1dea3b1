//! Mel-band projection source separation.
pub mod error;
pub mod bandmap;
pub mod spectral;
pub mod tensor;
pub mod model;
pub mod pipeline;
pub mod eval;
pub mod data_io;
pub mod trainer;
pub use error::{Error, Result};
