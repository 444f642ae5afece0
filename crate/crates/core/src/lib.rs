//! Source-free domain adaptation for per-pixel segmentation.
//!
//! A patch-MLP segmenter is trained on labeled source images, then adapted
//! to an unlabeled target domain without further access to source data.

pub mod cli;
pub mod codec;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod pseudo;
pub mod svg;

pub use error::{Error, Result};
