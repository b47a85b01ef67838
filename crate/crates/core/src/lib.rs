//! Compound-domain test-time adaptation for a small segmentation network.
//!
//! Batches arrive from latent domains that recur over time. Each sample is
//! given a pseudo-domain label by online clustering of low-level feature
//! statistics; the label picks one of K batch-norm affine branches, which is
//! adapted with an unsupervised loss weighted by the sample's similarity to
//! the source statistics.

pub mod adaptation;
pub mod bn;
pub mod clustering;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod par;
pub mod synth;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
