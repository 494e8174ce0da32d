//! Joint per-frame body-part segmentation and feature-similarity label
//! propagation for partially annotated videos.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64`, which is what training, gradient checks
//! and the command-line tool use.

pub mod aat;
pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod engine;
pub mod gradcheck;
pub mod error;
pub mod label;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod msi;
pub mod pnm;
pub mod propagation;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use error::{Result, SpnError};
pub use scalar::Scalar;

pub type Tensor = engine::Tensor<f64>;
pub type Tape = engine::Tape<f64>;
