//! Low-rank adapters in SVD form (`ΔW = P·diag(λ)·Q`) whose ranks move
//! between layers during training.
//!
//! Each allocation step scores every adapter by the entropy of its normalized
//! singular-value energy, prunes the weakest direction from the least
//! important adapters and grows the most important ones, under a budget that
//! decays cubically over training.

pub mod adapter;
pub mod allocator;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod importance;
pub mod matrix;
pub mod rng;
pub mod trace;
pub mod trainer;

pub use adapter::{Action, InitStrategy, RankChange, SvdAdapter};
pub use allocator::{AllocationEvent, AllocatorMode, BudgetSchedule};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use importance::{spectral_entropy, MetricKind};
pub use matrix::Matrix;
pub use rng::SeededRng;
pub use trainer::{run_training, TrainOutcome};
