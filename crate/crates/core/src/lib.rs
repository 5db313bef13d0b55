//! Co-training engine for instance object detection.
//!
//! Two detector heads label unlabeled images for each other. A small set of
//! key samples is chosen for human annotation by clustering colour
//! histograms and keeping the highest-entropy images of each cluster. The
//! heads are pushed apart by a loss on the difference of their feature gram
//! matrices, and pseudo-labels enter the training pool only when both heads
//! agree confidently.
//!
//! The detector itself lives behind [`detector::Detector`]; a deterministic
//! [`detector::SyntheticDetector`] makes the whole loop runnable without a
//! GPU.

pub mod clustering;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod features;
pub mod gram;
pub mod journal;
pub mod manifest;
pub mod model;
pub mod orchestrator;
pub mod scenario;
pub mod selection;
pub mod self_labeling;
pub mod session;
pub mod stats;
pub mod store;

pub use error::{Error, Result};
