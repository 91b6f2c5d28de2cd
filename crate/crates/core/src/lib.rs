pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod field;
pub mod hashgrid;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod render;
pub mod scene;
pub mod temporal;
pub mod train;

pub use error::{Error, Result};
