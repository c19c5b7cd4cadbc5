pub mod baselines;
pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
