//! Online test-time prototype adaptation for compositional zero-shot
//! classification on precomputed embeddings.
//!
//! The engine consumes one unlabeled feature vector at a time and keeps two
//! prototype banks per composition class (attribute-object pair): frozen
//! textual anchors and visual prototypes distilled from a per-class
//! confidence queue. Two residual adapter tables (one textual, one visual)
//! are updated online by minimizing prediction entropy plus a cross-modal
//! alignment loss; all arithmetic is plain sequential f64 so identical runs
//! are bit-identical.

pub mod config;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod evalmetrics;
pub mod harness;
pub mod io;
pub mod learning;
pub mod math;
pub mod prototypes;
pub mod queue;
pub mod space;

pub use config::{EngineConfig, OptimizerKind, Switches};
pub use engine::{Engine, KamState, PredictionRecord};
pub use error::{Error, Result};
pub use math::Mat;
pub use space::{CompositionSpace, Manifest, Pair, World};
