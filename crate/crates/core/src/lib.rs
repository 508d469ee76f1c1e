//! Topology-guided multi-teacher knowledge distillation for time-series
//! classifiers.
//!
//! The pipeline: extract persistence images from time-series windows
//! ([`topology`]), train a series teacher and an image teacher ([`nn`],
//! [`distill`]), then distill a compact series-only student with fused
//! logits, merged activation-similarity maps, an orthogonal patch-Gram
//! penalty, and annealing initialization. Evaluation utilities live in
//! [`metrics`]; dataset plumbing in [`data`]; on-disk formats in
//! [`container`].

pub mod container;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod topology;

pub use error::{Error, Result};
