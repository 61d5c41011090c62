pub mod cli;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oan;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod tiler;
pub mod train;

pub use error::{Error, Result};
