pub mod baselines;
pub mod compute;
pub mod config;
pub mod dataset;
pub mod doc;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod model;
pub mod synthetic;
pub mod training;
pub mod visual;
pub mod weak;

pub use error::{Error, Result};
