use alloc::format;
use alloc::vec::Vec;

use super::{LayerWeights, ModelConfig, TransformerWeights};
use crate::adaptors::{AdaptorParams, ContextId, Site, SiteParams};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::pipeline::{AssembledSequence, IMAGE_START, IMAGE_TOKENS};
use crate::rng::{self, DetRng};
use crate::tensor::Tensor;

/// Post-softmax attention weights, one `[n_heads, L, L]` tensor per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<Tensor>,
}

impl AttentionTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[L, vocab]`.
    pub logits: Tensor,
    pub trace: Option<AttentionTrace>,
}

/// Training-mode dropout source.
pub struct DropoutCtx<'r> {
    pub rng: &'r mut DetRng,
    pub p: f32,
}

impl DropoutCtx<'_> {
    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let n = tape.value(x).len();
        let mask = rng::dropout_mask(self.rng, n, self.p);
        let shape = tape.shape(x).to_vec();
        let m = tape.constant(&shape, mask);
        tape.mul(x, m)
    }
}

/// Handles produced by [`forward_tape`].
pub struct TapeForward {
    /// Final-normed hidden states `[L, d_model]`.
    pub hidden: Var,
    /// One attention node per layer; see [`Tape::attention_probs`].
    pub attention: Vec<Var>,
}

/// Embeds `token_ids`, replacing the image positions with `image` when
/// given (`[64, d_model]`, already projected).
pub fn embed_tokens<'a>(
    tape: &mut Tape<'a>,
    weights: &'a TransformerWeights,
    token_ids: &[u32],
    image: Option<Var>,
) -> Result<Var> {
    let table = tape.param_named(|| "base.token_embeddings".into(), &weights.token_embeddings);
    let idx: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
    match image {
        None => tape.gather_rows(table, &idx),
        Some(img) => {
            let img_end = IMAGE_START + IMAGE_TOKENS;
            if tape.shape(img) != [IMAGE_TOKENS, weights.config.d_model] || idx.len() < img_end {
                return Err(Error::dim(
                    "embed_tokens",
                    tape.shape(img),
                    &[IMAGE_TOKENS, weights.config.d_model],
                ));
            }
            let head = tape.gather_rows(table, &idx[..IMAGE_START])?;
            let tail = tape.gather_rows(table, &idx[img_end..])?;
            tape.concat_rows(&[head, img, tail])
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn project<'a>(
    tape: &mut Tape<'a>,
    x: Var,
    w: &'a Tensor,
    b: &'a Tensor,
    layer: usize,
    site: Site,
    adaptors: Option<&'a AdaptorParams>,
    groups: &[usize],
) -> Result<Var> {
    let wn = base_name(layer, site, "w");
    let bn = base_name(layer, site, "b");
    let wv = tape.param_named(|| wn, w);
    let bv = tape.param_named(|| bn, b);
    let h = tape.matmul(x, wv)?;
    let h = tape.add_row(h, bv)?;
    let Some(ad) = adaptors else { return Ok(h) };
    match ad.site(layer, site) {
        None => Ok(h),
        Some(SiteParams::Lora { a, b }) => {
            let av = tape.param_named(|| adaptor_name(layer, site, "lora_a"), a);
            let bv = tape.param_named(|| adaptor_name(layer, site, "lora_b"), b);
            let delta = tape.einsum_context(x, av, bv, groups)?;
            tape.add(h, delta)
        }
        Some(SiteParams::BitFit { delta }) => {
            let dv = tape.param_named(|| adaptor_name(layer, site, "bitfit_delta"), delta);
            tape.context_add(h, dv, groups)
        }
        Some(SiteParams::Ia3 { scale }) => {
            let sv = tape.param_named(|| adaptor_name(layer, site, "ia3_scale"), scale);
            tape.context_mul(h, sv, groups)
        }
    }
}

fn scale_site<'a>(
    tape: &mut Tape<'a>,
    x: Var,
    layer: usize,
    site: Site,
    adaptors: Option<&'a AdaptorParams>,
    groups: &[usize],
) -> Result<Var> {
    match adaptors.and_then(|a| a.site(layer, site)) {
        Some(SiteParams::Ia3 { scale }) => {
            let sv = tape.param_named(|| adaptor_name(layer, site, "ia3_scale"), scale);
            tape.context_mul(x, sv, groups)
        }
        _ => Ok(x),
    }
}

fn base_name(layer: usize, site: Site, prefix: &str) -> alloc::string::String {
    let s = match site {
        Site::Query => "q",
        Site::Key => "k",
        Site::Value => "v",
        Site::Output => "o",
        Site::Up => "up",
        Site::Down => "down",
        Site::Intermediate => "ffn_act",
    };
    format!("base.layers.{layer}.{prefix}_{s}")
}

fn adaptor_name(layer: usize, site: Site, suffix: &str) -> alloc::string::String {
    format!("adaptor.layers.{layer}.{}.{suffix}", site.as_str())
}

#[allow(clippy::too_many_arguments)]
fn block<'a>(
    tape: &mut Tape<'a>,
    cfg: &ModelConfig,
    lw: &'a LayerWeights,
    layer: usize,
    x: Var,
    positions: &[usize],
    adaptors: Option<&'a AdaptorParams>,
    groups: &[usize],
    dropout: &mut Option<&mut DropoutCtx<'_>>,
) -> Result<(Var, Var)> {
    let norm = tape.param_named(|| format!("base.layers.{layer}.attn_norm"), &lw.attn_norm);
    let xn = tape.rms_norm(x, norm)?;
    let q = project(tape, xn, &lw.w_q, &lw.b_q, layer, Site::Query, adaptors, groups)?;
    let k = project(tape, xn, &lw.w_k, &lw.b_k, layer, Site::Key, adaptors, groups)?;
    let v = project(tape, xn, &lw.w_v, &lw.b_v, layer, Site::Value, adaptors, groups)?;
    let base = cfg.effective_rope_base();
    let q = tape.rope(q, cfg.n_heads, positions, base)?;
    let k = tape.rope(k, cfg.n_heads, positions, base)?;
    let attn = tape.causal_attention(q, k, v, cfg.n_heads)?;
    let mut o = project(tape, attn, &lw.w_o, &lw.b_o, layer, Site::Output, adaptors, groups)?;
    if let Some(d) = dropout.as_deref_mut() {
        o = d.apply(tape, o)?;
    }
    let x = tape.add(x, o)?;

    let norm = tape.param_named(|| format!("base.layers.{layer}.ffn_norm"), &lw.ffn_norm);
    let xn = tape.rms_norm(x, norm)?;
    let u = project(tape, xn, &lw.w_up, &lw.b_up, layer, Site::Up, adaptors, groups)?;
    let act = tape.swiglu(u)?;
    let act = scale_site(tape, act, layer, Site::Intermediate, adaptors, groups)?;
    let mut f = project(tape, act, &lw.w_down, &lw.b_down, layer, Site::Down, adaptors, groups)?;
    if let Some(d) = dropout.as_deref_mut() {
        f = d.apply(tape, f)?;
    }
    Ok((tape.add(x, f)?, attn))
}

/// Runs every block on the embedded input `x0` (`[L, d_model]`) and the
/// final norm. `context_ids` has one entry per row of `x0`.
pub fn forward_tape<'a>(
    tape: &mut Tape<'a>,
    weights: &'a TransformerWeights,
    adaptors: Option<&'a AdaptorParams>,
    x0: Var,
    context_ids: &[ContextId],
    mut dropout: Option<&mut DropoutCtx<'_>>,
) -> Result<TapeForward> {
    let cfg = &weights.config;
    let shape = tape.shape(x0);
    if shape.len() != 2 || shape[1] != cfg.d_model || shape[0] > cfg.max_seq {
        return Err(Error::dim("forward", shape, &[cfg.max_seq, cfg.d_model]));
    }
    let l = shape[0];
    if context_ids.len() != l {
        return Err(Error::dim("forward", &[l], &[context_ids.len()]));
    }
    let groups = match adaptors {
        Some(a) => {
            a.check_against(cfg)?;
            a.spec().route(context_ids)?
        }
        None => Vec::new(),
    };
    let positions: Vec<usize> = (0..l).collect();
    let mut x = x0;
    let mut attention = Vec::with_capacity(cfg.n_layers);
    for (i, lw) in weights.layers.iter().enumerate() {
        let (next, attn) = block(tape, cfg, lw, i, x, &positions, adaptors, &groups, &mut dropout)?;
        x = next;
        attention.push(attn);
    }
    let norm = tape.param_named(|| "base.final_norm".into(), &weights.final_norm);
    let hidden = tape.rms_norm(x, norm)?;
    Ok(TapeForward { hidden, attention })
}

/// Vocabulary logits for the selected rows of `hidden` (all rows when
/// `rows` is `None`).
pub fn logits_tape<'a>(
    tape: &mut Tape<'a>,
    weights: &'a TransformerWeights,
    hidden: Var,
    rows: Option<&[usize]>,
) -> Result<Var> {
    let h = match rows {
        Some(r) => tape.gather_rows(hidden, r)?,
        None => hidden,
    };
    let head = tape.param_named(|| "base.lm_head".into(), &weights.lm_head);
    tape.matmul(h, head)
}

/// Evaluation-mode forward over an assembled sequence.
pub fn forward(
    weights: &TransformerWeights,
    seq: &AssembledSequence,
    adaptors: Option<&AdaptorParams>,
    trace: bool,
) -> Result<ForwardOutput> {
    let cfg = &weights.config;
    if seq.len() != cfg.max_seq {
        return Err(Error::Contract(format!(
            "sequence length {} differs from the model context {}",
            seq.len(),
            cfg.max_seq
        )));
    }
    let mut tape = Tape::new();
    let img = tape.param(&seq.image_block);
    let x0 = embed_tokens(&mut tape, weights, &seq.token_ids, Some(img))?;
    let out = forward_tape(&mut tape, weights, adaptors, x0, &seq.context_ids, None)?;
    let logits = logits_tape(&mut tape, weights, out.hidden, None)?;
    let trace = trace.then(|| AttentionTrace {
        layers: out
            .attention
            .iter()
            .map(|&a| {
                let p = tape.attention_probs(a).expect("attention node").to_vec();
                Tensor::new(&[cfg.n_heads, seq.len(), seq.len()], p).expect("trace shape")
            })
            .collect(),
    });
    Ok(ForwardOutput {
        logits: tape.to_tensor(logits),
        trace,
    })
}

/// Pairwise rotary embedding of `[heads, L, d_head]` by `pos · base^(−2i/d_head)`.
pub fn apply_rope(x: &Tensor, positions: &[usize], base: f32) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::dim("apply_rope", x.shape(), &[0, positions.len(), 0]));
    }
    let (heads, l, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if dh % 2 != 0 {
        return Err(Error::Config(format!("rope needs an even head width, got {dh}")));
    }
    if positions.len() != l {
        return Err(Error::dim("apply_rope", x.shape(), &[positions.len()]));
    }
    let freqs = kernels::rope_frequencies(dh, base);
    let mut data = x.data().to_vec();
    for h in 0..heads {
        for (i, &p) in positions.iter().enumerate() {
            let off = (h * l + i) * dh;
            kernels::rope_rotate(&mut data[off..off + dh], p, &freqs, 1.0);
        }
    }
    Tensor::new(x.shape(), data)
}

/// SwiGLU feed-forward of one block: `(silu(g) ⊙ v)·W_down + b_down` with
/// `[g | v] = x·W_up + b_up`.
pub fn swiglu_ffn(x: &Tensor, layer: &LayerWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let (wu, bu) = (tape.param(&layer.w_up), tape.param(&layer.b_up));
    let (wd, bd) = (tape.param(&layer.w_down), tape.param(&layer.b_down));
    let u = tape.matmul(xv, wu)?;
    let u = tape.add_row(u, bu)?;
    let act = tape.swiglu(u)?;
    let o = tape.matmul(act, wd)?;
    let o = tape.add_row(o, bd)?;
    Ok(tape.to_tensor(o))
}
