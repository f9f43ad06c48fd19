pub mod error;
pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod covariance;
pub mod data;
pub mod linalg;
pub mod lora;
pub mod losses;
pub mod model;
pub mod subspace;
pub mod trainer;

pub use error::{Error, Result};
