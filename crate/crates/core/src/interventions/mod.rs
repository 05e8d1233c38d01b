//! Waiting and peeking interventions.

mod cama;
mod peek;
mod wait;

pub use cama::{
    build_cama, build_cama_layers, build_rtma, CamaCache, CamaEntry, CamaOptions, Conditioning,
    Estimator, CAMA_MAGIC, DEFAULT_CAMA_SAMPLES, DEFAULT_EXHAUSTIVE_CAP,
};
pub use peek::{peek_plan, PeekMode, PeekPlan};
pub use wait::{wait_vectors, WaitKind};
