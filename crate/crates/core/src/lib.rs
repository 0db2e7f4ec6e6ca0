//! Keyed residual-stream watermarking with SAE-derived contrastive directions.
//!
//! The pipeline mines contrastive directions into a [`bank::DirectionBank`],
//! selects a keyed per-document subset, steers generation along it, and
//! detects the watermark with calibrated Stouffer statistics.

mod error;

pub mod attacks;
pub mod backend;
pub mod bank;
pub mod corpus;
pub mod detector;
pub mod generator;
pub mod linalg;
pub mod metrics;
pub mod mining;
pub mod par;
pub mod sae;
pub mod selection;

pub use error::{Error, Result};
