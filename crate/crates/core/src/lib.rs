//! Uncertainty-routed multi-agent decision pipeline.
//!
//! Specialist agents analyze one modality each; their findings are weighted
//! by confidence and semantic agreement, handed to a reasoning agent, and the
//! resulting decision is either released or escalated to a clinician
//! depending on a composite uncertainty score and an adaptive threshold.

pub mod agents;
pub mod clock;
pub mod config;
pub mod conflict;
pub mod embedding;
pub mod fusion;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod replay;
pub mod routing;
pub mod scalar;

pub use scalar::Scalar;

/// Double-precision aliases used throughout the pipeline.
pub type Embedding = embedding::EmbeddingVector<f64>;
pub type SharedDirection = conflict::SharedDirectionConfig<f64>;
pub type Uncertainty = model::UncertaintyBreakdown<f64>;
pub type UncertaintySettings = routing::UncertaintyConfig<f64>;
pub type Threshold = routing::ThresholdState<f64>;
