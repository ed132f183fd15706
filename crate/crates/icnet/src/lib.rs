//! From-scratch CPU implementation of a cascade multi-resolution segmentation
//! network, along with the machinery needed to study it: an analytic
//! convolution cost model, SGD training with poly learning-rate decay, L1
//! filter pruning, a deterministic synthetic scene generator, and
//! segmentation metrics including connected-component region-accuracy
//! histograms.
//!
//! The crate is a library first; see the `examples/` directory for one
//! runnable program per capability and `src/bin/icnet.rs` for the thin CLI
//! that strings them into reproducible experiments.

pub mod arch;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod experiments;
pub mod label;
pub mod metrics;
pub mod prune;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use label::{LabelMap, IGNORE};
