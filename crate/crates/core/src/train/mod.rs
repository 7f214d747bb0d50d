//! Optimisation and evaluation: Adam over the trainable set, masked
//! caption loss, perplexity, best-epoch selection and greedy decoding.

mod adam;
mod captioner;
mod looping;

pub use adam::{adam_step, Moments, OptimizerState};
pub use captioner::{CaptionModel, Example, TrainMode};
pub use looping::{
    generate, mean_nll, perplexity, train, BestSnapshot, EpochMetrics, TrainConfig, TrainEvent, TrainOutcome,
};
