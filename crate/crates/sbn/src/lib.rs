//! Batch normalization with sampled statistics.
//!
//! Normalization statistics can be estimated from a small, regularly shaped
//! subset of each batch (leading rows, a contiguous row range, a spatial
//! patch, or unstructured positions) or from synthetic "virtual" samples
//! matching offline dataset moments. The backward pass stays exact for
//! whichever subset produced the statistics.
//!
//! The crate also carries the machinery to check what the estimator theory
//! predicts: estimation-error traces, inter-layer error correlation,
//! sampled-mean variance under correlated data, moving-average variance
//! ratios, adder-tree speedup figures, a desk-scale training stack, a
//! simulated multi-node normalization regime, and a wall-clock benchmark of
//! the statistics kernel.
//!
//! With the default `parallel` feature the reduction tree and per-channel
//! moments run on rayon; results are bit-identical to the sequential path.

pub mod analysis;
pub mod batchnorm;
pub mod bench;
pub mod error;
pub mod microbn;
pub mod net;
pub mod report;
pub mod rng;
pub mod runner;
pub mod sampling;
pub mod tensor;
pub mod vdn;

pub use error::{Error, Result};
pub use rng::{RngStream, StreamPurpose};
pub use tensor::{ChannelStats, Tensor4};
