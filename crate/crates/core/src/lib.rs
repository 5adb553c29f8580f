//! Training and evaluation kit for noise-robust text-to-image person retrieval.
//!
//! The crate bundles a small reverse-mode tensor library, toy dual transformer encoders
//! with an EMA teacher, attention-weighted selective masking, the bidirectional
//! distribution-matching and weight-adjusted focal losses, a synthetic noisy dataset
//! generator, retrieval metrics and the experiment harness that ties them together.

pub mod awm;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod seed;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
