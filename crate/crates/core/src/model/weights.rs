use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::ModelConfig;
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

/// Frozen parameters of one transformer block. Projections are stored as
/// `[d_in, d_out]` and applied as `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ffn_norm: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

impl LayerWeights {
    fn fields(&self) -> [(&'static str, &Tensor); 14] {
        [
            ("attn_norm", &self.attn_norm),
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ffn_norm", &self.ffn_norm),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 14] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
            ("w_k", &mut self.w_k),
            ("b_k", &mut self.b_k),
            ("w_v", &mut self.w_v),
            ("b_v", &mut self.b_v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("ffn_norm", &mut self.ffn_norm),
            ("w_up", &mut self.w_up),
            ("b_up", &mut self.b_up),
            ("w_down", &mut self.w_down),
            ("b_down", &mut self.b_down),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub token_embeddings: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

/// Names and shapes of every base tensor, in [`TransformerWeights::named_tensors`] order.
pub fn base_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (dm, fused, inner) = (config.d_model, config.d_ffn_fused, config.d_ffn_inner);
    let mut out = vec![(String::from("base.token_embeddings"), vec![config.vocab_size, dm])];
    for i in 0..config.n_layers {
        let fields: [(&str, Vec<usize>); 14] = [
            ("attn_norm", vec![dm]),
            ("w_q", vec![dm, dm]),
            ("b_q", vec![dm]),
            ("w_k", vec![dm, dm]),
            ("b_k", vec![dm]),
            ("w_v", vec![dm, dm]),
            ("b_v", vec![dm]),
            ("w_o", vec![dm, dm]),
            ("b_o", vec![dm]),
            ("ffn_norm", vec![dm]),
            ("w_up", vec![dm, fused]),
            ("b_up", vec![fused]),
            ("w_down", vec![inner, dm]),
            ("b_down", vec![dm]),
        ];
        for (name, shape) in fields {
            out.push((format!("base.layers.{i}.{name}"), shape));
        }
    }
    out.push((String::from("base.final_norm"), vec![dm]));
    out.push((String::from("base.lm_head"), vec![dm, config.vocab_size]));
    out
}

/// Deterministic initialisation: `N(0, init_std)` matrices, zero biases,
/// unit norm scales. Everything starts frozen.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<TransformerWeights> {
    config.validate()?;
    let mut rng = rng::stream(seed, rng::STREAM_MODEL);
    let std = config.init_std;
    let (dm, fused, inner) = (config.d_model, config.d_ffn_fused, config.d_ffn_inner);
    let token_embeddings = rng::normal_tensor(&mut rng, &[config.vocab_size, dm], std);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: Tensor::ones(&[dm]),
            w_q: rng::normal_tensor(&mut rng, &[dm, dm], std),
            b_q: Tensor::zeros(&[dm]),
            w_k: rng::normal_tensor(&mut rng, &[dm, dm], std),
            b_k: Tensor::zeros(&[dm]),
            w_v: rng::normal_tensor(&mut rng, &[dm, dm], std),
            b_v: Tensor::zeros(&[dm]),
            w_o: rng::normal_tensor(&mut rng, &[dm, dm], std),
            b_o: Tensor::zeros(&[dm]),
            ffn_norm: Tensor::ones(&[dm]),
            w_up: rng::normal_tensor(&mut rng, &[dm, fused], std),
            b_up: Tensor::zeros(&[fused]),
            w_down: rng::normal_tensor(&mut rng, &[inner, dm], std),
            b_down: Tensor::zeros(&[dm]),
        })
        .collect();
    let lm_head = rng::normal_tensor(&mut rng, &[dm, config.vocab_size], std);
    Ok(TransformerWeights {
        config: *config,
        token_embeddings,
        layers,
        final_norm: Tensor::ones(&[dm]),
        lm_head,
    })
}

impl TransformerWeights {
    /// All tensors with stable dotted names, e.g. `base.layers.0.w_q`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(3 + 14 * self.layers.len());
        out.push((String::from("base.token_embeddings"), &self.token_embeddings));
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.fields() {
                out.push((format!("base.layers.{i}.{name}"), t));
            }
        }
        out.push((String::from("base.final_norm"), &self.final_norm));
        out.push((String::from("base.lm_head"), &self.lm_head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(3 + 14 * self.layers.len());
        out.push((String::from("base.token_embeddings"), &mut self.token_embeddings));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.fields_mut() {
                out.push((format!("base.layers.{i}.{name}"), t));
            }
        }
        out.push((String::from("base.final_norm"), &mut self.final_norm));
        out.push((String::from("base.lm_head"), &mut self.lm_head));
        out
    }

    /// Marks every base tensor trainable (full fine-tuning) or frozen.
    pub fn set_trainable(&mut self, on: bool) {
        for (_, t) in self.named_tensors_mut() {
            t.set_requires_grad(on);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}
