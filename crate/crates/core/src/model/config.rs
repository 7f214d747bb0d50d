use alloc::format;

use crate::error::{Error, Result};

/// Hyperparameters of the decoder-only language model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Output width of the fused gate+up projection.
    pub d_ffn_fused: usize,
    /// Width after gating, half of `d_ffn_fused`.
    pub d_ffn_inner: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_base: f32,
    /// Adjusted rotary base; replaces `rope_base` when set.
    pub rope_abf_base: Option<f32>,
    pub dropout_p: f32,
    /// Standard deviation of the normal weight initialisation.
    pub init_std: f32,
}

impl ModelConfig {
    /// Full-size backbone: 768 wide, 12 layers, 12 heads, 6144/3072 FFN.
    pub fn paper() -> Self {
        ModelConfig {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ffn_fused: 6144,
            d_ffn_inner: 3072,
            vocab_size: 50_272,
            max_seq: 128,
            rope_base: 10_000.0,
            rope_abf_base: None,
            dropout_p: 0.1,
            init_std: 0.02,
        }
    }

    /// Desk-scale model used for the training experiments.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ffn_fused: 512,
            d_ffn_inner: 256,
            vocab_size,
            max_seq: 128,
            rope_base: 10_000.0,
            rope_abf_base: None,
            dropout_p: 0.1,
            init_std: 0.05,
        }
    }

    /// Small enough for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ffn_fused: 32,
            d_ffn_inner: 16,
            vocab_size,
            max_seq: 128,
            rope_base: 10_000.0,
            rope_abf_base: None,
            dropout_p: 0.1,
            init_std: 0.2,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn effective_rope_base(&self) -> f32 {
        self.rope_abf_base.unwrap_or(self.rope_base)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return fail(format!("zero-sized model field in {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if !self.d_head().is_multiple_of(2) {
            return fail(format!("head width {} must be even for rotary embeddings", self.d_head()));
        }
        if self.d_ffn_inner == 0 || self.d_ffn_fused != 2 * self.d_ffn_inner {
            return fail(format!(
                "fused FFN width {} must be twice the inner width {}",
                self.d_ffn_fused, self.d_ffn_inner
            ));
        }
        if self.max_seq < 2 {
            return fail(format!("max_seq {} must be at least 2", self.max_seq));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        let base = self.effective_rope_base();
        if !(base.is_finite() && base > 1.0) {
            return fail(format!("rope base {base} must be finite and > 1"));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return fail(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }
}
