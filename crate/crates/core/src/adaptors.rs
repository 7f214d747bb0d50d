//! Context-conditioned adaptors.
//!
//! Each adapted site holds one parameter group per context. A token at
//! position `l` with context id `c_l` is processed by group `c_l` only:
//!
//! * LoRA:   `h[l] = W·x[l] + b + (x[l]·A[c_l])·B[c_l]`
//! * BitFit: `h[l] = W·x[l] + b + Δb[c_l]`
//! * IA³:    `act[l] ⊙ scale[c_l]` on keys, values and the FFN intermediate
//!
//! A context-agnostic adaptor is the one-context special case: every token
//! is routed to group 0.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::einsum;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng;
use crate::tensor::Tensor;

/// Per-position domain label selecting an adaptor parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ContextId(u16);

impl ContextId {
    pub const TEXT: ContextId = ContextId(0);
    pub const IMAGE: ContextId = ContextId(1);

    pub fn new(id: usize) -> Self {
        ContextId(u16::try_from(id).expect("context id fits in u16"))
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdaptorKind {
    Lora,
    BitFit,
    Ia3,
}

impl AdaptorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptorKind::Lora => "lora",
            AdaptorKind::BitFit => "bitfit",
            AdaptorKind::Ia3 => "ia3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lora" => Ok(AdaptorKind::Lora),
            "bitfit" => Ok(AdaptorKind::BitFit),
            "ia3" => Ok(AdaptorKind::Ia3),
            other => Err(Error::Spec(format!("unknown adaptor kind `{other}`"))),
        }
    }
}

/// Which sublayers are adapted: `A`, `F` or `AF`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Targets {
    pub attention: bool,
    pub ffn: bool,
}

impl Targets {
    pub const A: Targets = Targets { attention: true, ffn: false };
    pub const F: Targets = Targets { attention: false, ffn: true };
    pub const AF: Targets = Targets { attention: true, ffn: true };

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Targets::A),
            "F" => Ok(Targets::F),
            "AF" | "FA" => Ok(Targets::AF),
            other => Err(Error::Spec(format!("unknown target set `{other}`"))),
        }
    }

    pub fn label(self) -> &'static str {
        match (self.attention, self.ffn) {
            (true, true) => "AF",
            (true, false) => "A",
            (false, true) => "F",
            (false, false) => "",
        }
    }

    pub fn is_empty(self) -> bool {
        !self.attention && !self.ffn
    }
}

/// Injection points inside one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
    /// Post-gating FFN activation (IA³ only).
    Intermediate,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::Query => "q",
            Site::Key => "k",
            Site::Value => "v",
            Site::Output => "o",
            Site::Up => "up",
            Site::Down => "down",
            Site::Intermediate => "ffn_act",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AdaptorSpec {
    pub kind: AdaptorKind,
    /// LoRA rank; ignored by the other families.
    pub rank: usize,
    pub targets: Targets,
    pub num_contexts: usize,
    pub context_specific: bool,
}

impl AdaptorSpec {
    pub fn lora(rank: usize, targets: Targets, num_contexts: usize, context_specific: bool) -> Self {
        AdaptorSpec {
            kind: AdaptorKind::Lora,
            rank,
            targets,
            num_contexts,
            context_specific,
        }
    }

    pub fn bitfit(targets: Targets, num_contexts: usize, context_specific: bool) -> Self {
        AdaptorSpec {
            kind: AdaptorKind::BitFit,
            rank: 0,
            targets,
            num_contexts,
            context_specific,
        }
    }

    pub fn ia3(targets: Targets, num_contexts: usize, context_specific: bool) -> Self {
        AdaptorSpec {
            kind: AdaptorKind::Ia3,
            rank: 0,
            targets,
            num_contexts,
            context_specific,
        }
    }

    /// Parameter groups actually allocated per site.
    pub fn groups(&self) -> usize {
        if self.context_specific {
            self.num_contexts
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Spec("adaptor targets are empty".into()));
        }
        if self.num_contexts == 0 {
            return Err(Error::Spec("at least one context is required".into()));
        }
        if self.kind == AdaptorKind::Lora && self.rank == 0 {
            return Err(Error::Spec("LoRA rank must be positive".into()));
        }
        Ok(())
    }

    /// Adapted sites of one block, in a fixed order.
    pub fn sites(&self) -> Vec<Site> {
        let mut out = Vec::new();
        match self.kind {
            AdaptorKind::Lora | AdaptorKind::BitFit => {
                if self.targets.attention {
                    out.extend([Site::Query, Site::Key, Site::Value, Site::Output]);
                }
                if self.targets.ffn {
                    out.extend([Site::Up, Site::Down]);
                }
            }
            AdaptorKind::Ia3 => {
                if self.targets.attention {
                    out.extend([Site::Key, Site::Value]);
                }
                if self.targets.ffn {
                    out.push(Site::Intermediate);
                }
            }
        }
        out
    }

    /// Maps per-position context ids onto parameter groups. Agnostic
    /// adaptors and single-context specs send every position to group 0.
    pub fn route(&self, ctx: &[ContextId]) -> Result<Vec<usize>> {
        if self.num_contexts == 1 {
            return Ok(vec![0; ctx.len()]);
        }
        let ids = einsum::check_routing(ctx, self.num_contexts)?;
        if self.context_specific {
            Ok(ids)
        } else {
            Ok(vec![0; ids.len()])
        }
    }

    /// Short human label, e.g. `context-lora-8-AF`.
    pub fn label(&self) -> String {
        let prefix = if self.context_specific { "context" } else { "agnostic" };
        match self.kind {
            AdaptorKind::Lora => format!("{prefix}-lora-{}-{}", self.rank, self.targets.label()),
            k => format!("{prefix}-{}-{}", k.as_str(), self.targets.label()),
        }
    }
}

/// `(d_in, d_out)` of a projection site, or the width of a scaled site.
pub fn site_dims(site: Site, config: &ModelConfig) -> (usize, usize) {
    let (dm, fused, inner) = (config.d_model, config.d_ffn_fused, config.d_ffn_inner);
    match site {
        Site::Query | Site::Key | Site::Value | Site::Output => (dm, dm),
        Site::Up => (dm, fused),
        Site::Down => (inner, dm),
        Site::Intermediate => (inner, inner),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SiteParams {
    /// `a: [C, d_in, r]`, `b: [C, r, d_out]`.
    Lora { a: Tensor, b: Tensor },
    /// `[C, d_out]`, added after the frozen bias.
    BitFit { delta: Tensor },
    /// `[C, width]`, multiplied into the activation.
    Ia3 { scale: Tensor },
}

impl SiteParams {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            SiteParams::Lora { a, b } => vec![("lora_a", a), ("lora_b", b)],
            SiteParams::BitFit { delta } => vec![("bitfit_delta", delta)],
            SiteParams::Ia3 { scale } => vec![("ia3_scale", scale)],
        }
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            SiteParams::Lora { a, b } => vec![("lora_a", a), ("lora_b", b)],
            SiteParams::BitFit { delta } => vec![("bitfit_delta", delta)],
            SiteParams::Ia3 { scale } => vec![("ia3_scale", scale)],
        }
    }
}

/// The trainable adaptor state for a whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorParams {
    spec: AdaptorSpec,
    layers: Vec<Vec<(Site, SiteParams)>>,
}

const LORA_INIT_STD: f32 = 0.02;

/// Allocates adaptors at their neutral point: LoRA `A ~ N(0, 0.02)` with
/// `B = 0`, BitFit `Δb = 0`, IA³ `scale = 1`.
pub fn attach(spec: &AdaptorSpec, config: &ModelConfig, seed: u64) -> Result<AdaptorParams> {
    spec.validate()?;
    config.validate()?;
    let mut rng = rng::stream(seed, rng::STREAM_ADAPTORS);
    let c = spec.groups();
    let layers = (0..config.n_layers)
        .map(|_| {
            spec.sites()
                .into_iter()
                .map(|site| {
                    let (d_in, d_out) = site_dims(site, config);
                    let params = match spec.kind {
                        AdaptorKind::Lora => SiteParams::Lora {
                            a: rng::normal_tensor(&mut rng, &[c, d_in, spec.rank], LORA_INIT_STD).with_grad(),
                            b: Tensor::zeros(&[c, spec.rank, d_out]).with_grad(),
                        },
                        AdaptorKind::BitFit => SiteParams::BitFit {
                            delta: Tensor::zeros(&[c, d_out]).with_grad(),
                        },
                        AdaptorKind::Ia3 => SiteParams::Ia3 {
                            scale: Tensor::ones(&[c, d_out]).with_grad(),
                        },
                    };
                    (site, params)
                })
                .collect()
        })
        .collect();
    Ok(AdaptorParams { spec: *spec, layers })
}

impl AdaptorParams {
    pub fn spec(&self) -> &AdaptorSpec {
        &self.spec
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn site(&self, layer: usize, site: Site) -> Option<&SiteParams> {
        self.layers
            .get(layer)?
            .iter()
            .find(|(s, _)| *s == site)
            .map(|(_, p)| p)
    }

    pub fn site_mut(&mut self, layer: usize, site: Site) -> Option<&mut SiteParams> {
        self.layers
            .get_mut(layer)?
            .iter_mut()
            .find(|(s, _)| *s == site)
            .map(|(_, p)| p)
    }

    /// Named trainable tensors, e.g. `adaptor.layers.3.q.lora_a`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (site, p) in layer {
                for (suffix, t) in p.tensors() {
                    out.push((param_name(i, *site, suffix), t));
                }
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (site, p) in layer {
                let site = *site;
                for (suffix, t) in p.tensors_mut() {
                    out.push((param_name(i, site, suffix), t));
                }
            }
        }
        out
    }

    /// Number of allocated trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Checks every tensor against the shapes `config` implies.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::Adaptor(format!(
                "{} adaptor layers for a {}-layer model",
                self.layers.len(),
                config.n_layers
            )));
        }
        let c = self.spec.groups();
        for (i, layer) in self.layers.iter().enumerate() {
            for (site, p) in layer {
                let (d_in, d_out) = site_dims(*site, config);
                let ok = match p {
                    SiteParams::Lora { a, b } => {
                        a.shape() == [c, d_in, self.spec.rank] && b.shape() == [c, self.spec.rank, d_out]
                    }
                    SiteParams::BitFit { delta } => delta.shape() == [c, d_out],
                    SiteParams::Ia3 { scale } => scale.shape() == [c, d_out],
                };
                if !ok {
                    return Err(Error::Adaptor(format!(
                        "layer {i} site {} does not match the model dimensions",
                        site.as_str()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn param_name(layer: usize, site: Site, suffix: &str) -> String {
    format!("adaptor.layers.{layer}.{}.{suffix}", site.as_str())
}

/// Names and shapes of every tensor [`attach`] allocates, without
/// allocating them.
pub fn param_layout(spec: &AdaptorSpec, config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    spec.validate()?;
    config.validate()?;
    let c = spec.groups();
    let mut out = Vec::new();
    for layer in 0..config.n_layers {
        for site in spec.sites() {
            let (d_in, d_out) = site_dims(site, config);
            match spec.kind {
                AdaptorKind::Lora => {
                    out.push((param_name(layer, site, "lora_a"), vec![c, d_in, spec.rank]));
                    out.push((param_name(layer, site, "lora_b"), vec![c, spec.rank, d_out]));
                }
                AdaptorKind::BitFit => out.push((param_name(layer, site, "bitfit_delta"), vec![c, d_out])),
                AdaptorKind::Ia3 => out.push((param_name(layer, site, "ia3_scale"), vec![c, d_out])),
            }
        }
    }
    Ok(out)
}

/// Trainable scalars counted by enumerating [`param_layout`].
pub fn count_enumerated(spec: &AdaptorSpec, config: &ModelConfig) -> Result<usize> {
    Ok(param_layout(spec, config)?
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

/// Closed-form trainable scalar count for `spec` on `config`.
pub fn count_trainable(spec: &AdaptorSpec, config: &ModelConfig) -> usize {
    let (dm, fused, inner) = (config.d_model, config.d_ffn_fused, config.d_ffn_inner);
    let (attn, ffn) = (spec.targets.attention, spec.targets.ffn);
    let per_layer = match spec.kind {
        AdaptorKind::Lora => {
            let a = if attn { 4 * (dm + dm) } else { 0 };
            let f = if ffn { (dm + fused) + (inner + dm) } else { 0 };
            spec.rank * (a + f)
        }
        AdaptorKind::BitFit => {
            let a = if attn { 4 * dm } else { 0 };
            let f = if ffn { fused + dm } else { 0 };
            a + f
        }
        AdaptorKind::Ia3 => {
            let a = if attn { 2 * dm } else { 0 };
            let f = if ffn { inner } else { 0 };
            a + f
        }
    };
    per_layer * config.n_layers * spec.groups()
}

fn routed(ctx: &[ContextId], contexts: usize, rows: usize) -> Result<Vec<usize>> {
    if ctx.len() != rows {
        return Err(Error::dim("context routing", &[rows], &[ctx.len()]));
    }
    einsum::check_routing(ctx, contexts)
}

/// `h[l] = x[l]·W + b + (x[l]·A[c_l])·B[c_l]` for `x [L, d_in]`,
/// `w [d_in, d_out]`, `b [d_out]`.
pub fn apply_context_lora(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    a: &Tensor,
    b: &Tensor,
    ctx: &[ContextId],
) -> Result<Tensor> {
    let base = crate::tensor::matmul(x, w)?;
    let d_out = w.shape()[1];
    if bias.shape() != [d_out] {
        return Err(Error::dim("apply_context_lora", w.shape(), bias.shape()));
    }
    let delta = einsum::einsum_context(x, a, b, ctx)?;
    if delta.shape() != base.shape() {
        return Err(Error::dim("apply_context_lora", base.shape(), delta.shape()));
    }
    let data = base
        .data()
        .chunks(d_out)
        .zip(delta.data().chunks(d_out))
        .flat_map(|(h, d)| h.iter().zip(bias.data()).zip(d).map(|((h, b), d)| h + b + d))
        .collect();
    Tensor::new(base.shape(), data)
}

/// `h[l] + Δb[c_l]`.
pub fn apply_context_bitfit(h: &Tensor, delta: &Tensor, ctx: &[ContextId]) -> Result<Tensor> {
    route_rows(h, delta, ctx, "apply_context_bitfit", |x, t| x + t)
}

/// `act[l] ⊙ scale[c_l]`.
pub fn apply_context_ia3(act: &Tensor, scale: &Tensor, ctx: &[ContextId]) -> Result<Tensor> {
    route_rows(act, scale, ctx, "apply_context_ia3", |x, t| x * t)
}

fn route_rows(
    x: &Tensor,
    table: &Tensor,
    ctx: &[ContextId],
    op: &'static str,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    let n = *x.shape().last().unwrap_or(&1);
    if table.rank() != 2 || table.shape()[1] != n {
        return Err(Error::dim(op, x.shape(), table.shape()));
    }
    let ids = routed(ctx, table.shape()[0], x.numel() / n)?;
    let data = x
        .data()
        .chunks(n)
        .zip(&ids)
        .flat_map(|(row, &c)| {
            let t = table.row(c);
            row.iter().zip(t).map(|(&a, &b)| f(a, b)).collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Largest `d_in * d_out` the oracle will materialise.
pub const ORACLE_MAX_ELEMS: usize = 1 << 20;

/// Brute-force reference for the LoRA delta: builds `ΔW_c = A[c]·B[c]`
/// explicitly for every context and applies it token by token.
pub fn materialize_delta_oracle(x: &Tensor, a: &Tensor, b: &Tensor, ctx: &[ContextId]) -> Result<Tensor> {
    if x.rank() != 2 || a.rank() != 3 || b.rank() != 3 {
        return Err(Error::dim("materialize_delta_oracle", x.shape(), a.shape()));
    }
    let (rows, d_in) = (x.shape()[0], x.shape()[1]);
    let (c, r, d_out) = (a.shape()[0], a.shape()[2], b.shape()[2]);
    if a.shape()[1] != d_in || b.shape()[0] != c || b.shape()[1] != r {
        return Err(Error::dim("materialize_delta_oracle", a.shape(), b.shape()));
    }
    if d_in * d_out > ORACLE_MAX_ELEMS {
        return Err(Error::Refusal(format!(
            "materialising a {d_in}x{d_out} delta exceeds the oracle size guard"
        )));
    }
    let ids = routed(ctx, c, rows)?;
    // Accumulated in f64 so the reference carries less rounding than the
    // f32 path it checks.
    let deltas: Vec<Vec<f64>> = (0..c)
        .map(|ci| {
            let mut dw = vec![0.0f64; d_in * d_out];
            for i in 0..d_in {
                for k in 0..r {
                    let aik = f64::from(a.data()[(ci * d_in + i) * r + k]);
                    for j in 0..d_out {
                        dw[i * d_out + j] += aik * f64::from(b.data()[(ci * r + k) * d_out + j]);
                    }
                }
            }
            dw
        })
        .collect();
    let mut out = vec![0.0f32; rows * d_out];
    for (l, &ci) in ids.iter().enumerate() {
        let xr = x.row(l);
        let dw = &deltas[ci];
        for j in 0..d_out {
            out[l * d_out + j] = (0..d_in).map(|i| f64::from(xr[i]) * dw[i * d_out + j]).sum::<f64>() as f32;
        }
    }
    Tensor::new(&[rows, d_out], out)
}
