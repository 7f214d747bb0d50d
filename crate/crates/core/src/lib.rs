//! Context-conditioned parameter-efficient fine-tuning for a frozen
//! decoder-only transformer.
//!
//! Every token position carries a context id (image or text in the
//! captioning setup) and each adaptor keeps one parameter group per
//! context. Three adaptor families are provided: low-rank deltas (LoRA),
//! additive biases (BitFit) and multiplicative scales (IA³).
//!
//! ```text
//! [BOS] [img 1 .. img 64] [caption ..] [EOS] [PAD ..]   (128 positions)
//!   t     i ... i           t ...        t     t          context ids
//! ```
//!
//! The crate is `no_std` + `alloc`. The `std` feature (default) only turns
//! on runtime CPU feature detection in the matmul backend.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adaptors;
pub mod autograd;
pub mod einsum;
mod error;
pub mod grad_check;
pub mod heatmap;
mod kernels;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use adaptors::{AdaptorKind, AdaptorParams, AdaptorSpec, ContextId, Targets};
pub use autograd::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use heatmap::{extract_heatmap, HeatmapGrid};
pub use model::{AttentionTrace, ModelConfig, TransformerWeights};
pub use pipeline::{AssembledSequence, CaptionRecord, ImageEmbeddingSet};
pub use tensor::Tensor;
pub use train::{CaptionModel, Example, TrainConfig, TrainMode};
