//! Training: class-aware sampling, SGD with momentum, and centroid updates
//! alternating with gradient steps.

mod engine;
mod optimizer;
mod sampler;

pub use engine::{EpochRow, Phase, StepOutcome, TrainConfig, TrainState, Trainer};
pub use optimizer::{sgd_momentum, zero_velocity};
pub use sampler::{sample_neighborhood_batch, Batch, ClassIndex, SamplerState, Sampling};
