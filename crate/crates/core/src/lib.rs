//! Delta-constrained low-rank compression of convolutional classifiers.
//!
//! Given a trained model, its data, and a tolerable accuracy drop, the
//! pipeline replaces convolution and dense layers with factorized
//! equivalents, searches per-layer ranks (exploration, then annealing),
//! fine-tunes, and reports before/after metrics.

pub mod annealer;
pub mod checkpoint;
pub mod conductor;
pub mod data;
pub mod error;
pub mod explorer;
pub mod lowrank;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{LayerSpec, Model};
pub use tensor::{ConvGeometry, Tensor};
