//! Frozen decoder-only language model: pre-norm blocks with rotary causal
//! attention and a SwiGLU feed-forward, plus adaptor injection points.

mod config;
mod forward;
mod weights;

pub use config::ModelConfig;
pub use forward::{
    apply_rope, embed_tokens, forward, forward_tape, logits_tape, swiglu_ffn, AttentionTrace, DropoutCtx,
    ForwardOutput, TapeForward,
};
pub use weights::{base_layout, init_model, LayerWeights, TransformerWeights};
