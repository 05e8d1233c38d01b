//! Interpretability lab for a small decoder-only transformer trained on
//! single-token arithmetic.
//!
//! The crate provides a forward pass with residual capture and attention
//! interventions ([`forward`]), the arithmetic task suite ([`tasks`]),
//! context-aware mean ablation and attention peeking ([`interventions`]),
//! the wait/transfer subgraph evaluator with grid sweeps ([`discovery`]),
//! follow-up analyses such as head pruning and logit lens ([`analysis`]),
//! and a deterministic trainer that produces the seed model ([`trainer`]).

pub mod analysis;
pub mod container;
pub mod discovery;
pub mod error;
pub mod forward;
pub mod interventions;
pub mod model;
pub mod tasks;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
pub use forward::{forward, predict, Capture, ForwardTrace, HeadMode, InterventionPlan};
pub use model::{HeadId, ModelConfig, ModelWeights};
pub use tasks::{Dataset, TaskInstance, Template, TokenGroup, Vocab};
