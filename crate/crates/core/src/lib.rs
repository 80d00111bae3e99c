//! Harness for probing contrastive vision-language models for the bouba-kiki
//! effect: stimulus generation, label-probability and saliency probes,
//! aggregate statistics and report emission.

pub mod cli_report;
mod error;
pub mod lexicon;
pub mod metrics;
pub mod model_adapter;
pub mod prob_probe;
mod raster;
pub mod saliency_probe;
pub mod shapes;
pub mod store;
pub mod util;

pub use error::{Error, Result};
