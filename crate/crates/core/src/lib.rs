pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod image;
pub mod infer;
pub mod interpolant;
pub mod losses;
pub mod modality;
pub mod model;
pub mod params;
pub mod sample;
pub mod sampler;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
