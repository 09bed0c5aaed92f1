pub mod bench;
pub mod cli;
pub mod cmi;
pub mod crt;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod knn;
pub mod nn;
pub mod rng;
pub mod synthetic;

pub use data::{ColumnRole, Dataset};
pub use error::{Error, Result};
