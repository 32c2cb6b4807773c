//! Progressive segmentation-guided scene text removal.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod train;

pub use error::{Error, Result};
