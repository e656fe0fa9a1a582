//! Instruction-tuned facial-expression modelling toolkit.
//!
//! The crate covers the full desk-scale pipeline: face detection and prior
//! extraction, a frozen patch-transformer visual backbone, an instruction-aware
//! clue aggregator, face-information mining attention, token assembly for a
//! tiny causal decoder, low-rank adapter tuning, instruction-data generation,
//! and a closed-set evaluation harness with per-class metrics.
//!
//! All numeric components are generic over [`Scalar`] (`f32` or `f64`).
//! `f32` is the working type for training and the CLI; `f64` exists so that
//! finite-difference gradient checks run at full precision.

pub mod aggregator;
pub mod assembly;
pub mod blocks;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod graph;
pub mod instruct;
pub mod llm;
pub mod lora;
pub mod media;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod optim;
pub mod param;
pub mod priors;
pub mod sampler;
pub mod scalar;
pub mod tokenizer;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working precision for training and the CLI.
pub type DefaultScalar = f32;

/// Full pipeline at working precision.
pub type Model = model::Model<f32>;
/// Full pipeline at check precision (finite-difference gradient checks).
pub type ModelF64 = model::Model<f64>;
