//! Patch-based transfer-learning classifier for Persian miniature paintings.
//!
//! Each painting is cut into five patches (four quadrants and an
//! overlapping center), every patch is embedded by a frozen backbone, a
//! small dense head classifies each patch, and the five per-patch vectors
//! are summed to pick the image's school. The [`eval`] module runs the whole
//! pipeline under stratified k-fold cross-validation.

pub mod backbone;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod head;
pub mod patching;
pub mod seed;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
