//! Few-shot interpretable anomaly detection: a frozen CNN backbone, a trainable
//! reduction block, an entropy-scored linear head trained jointly with a
//! distance-margin metric loss, gradient-entropy heatmaps and evaluation tools.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod head;
pub mod interpret;
pub mod layers;
pub mod metric;
pub mod model;
pub mod objective;
pub mod optim;
pub mod raster;
pub mod tensor_io;
pub mod train;

pub use error::{Error, Result};
