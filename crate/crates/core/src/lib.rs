//! Few-shot community models for content classification on social graphs.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod graph;
pub mod homophily;
pub mod io;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations used by the command line tools.
pub type Matrix = autodiff::Matrix<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type ModelState = model::ModelState<f64>;
pub type NodeBatch = model::NodeBatch<f64>;
pub type TextBaseline = model::TextBaseline<f64>;
pub type Trained = meta::Trained<f64>;
pub type AdamW = meta::AdamW<f64>;

/// Single-precision instantiations.
pub mod f32 {
    pub type Matrix = crate::autodiff::Matrix<f32>;
    pub type Tape = crate::autodiff::Tape<f32>;
    pub type ModelState = crate::model::ModelState<f32>;
    pub type NodeBatch = crate::model::NodeBatch<f32>;
}
