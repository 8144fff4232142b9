//! Microstructure fingerprinting: local features, visual dictionaries,
//! moment fingerprints and classifiers for micrograph datasets.

pub mod cluster;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod featureio;
pub mod features;
pub mod fingerprint;
pub mod graph;
pub mod keypoints;
pub mod pipeline;
pub mod reduce;
pub mod supervised;
pub mod synth;

pub use error::{Error, Result};
