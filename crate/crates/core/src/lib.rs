pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod explore;
pub mod gradsuite;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
