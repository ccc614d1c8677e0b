pub mod autodiff;
pub mod body;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod feature_stream;
pub mod grad_suite;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pose_stream;
#[cfg(test)]
pub(crate) mod reference;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
