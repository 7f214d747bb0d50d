//! Run configuration: a TOML document whose every field has a default.
//! The resolved form is echoed into metrics logs and checkpoints.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ctxpeft_core::adaptors::{AdaptorKind, AdaptorSpec};
use ctxpeft_core::pipeline::Tokenizer;
use ctxpeft_core::{ModelConfig, Targets, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `toy`, `tiny` or `paper`; the remaining fields override it when set.
    pub preset: String,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ffn_fused: Option<usize>,
    pub d_ffn_inner: Option<usize>,
    pub rope_base: Option<f32>,
    pub rope_abf_base: Option<f32>,
    pub init_std: Option<f32>,
    /// Seed of the frozen base weights.
    pub base_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            d_model: None,
            n_layers: None,
            n_heads: None,
            d_ffn_fused: None,
            d_ffn_inner: None,
            rope_base: None,
            rope_abf_base: None,
            init_std: None,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptorSection {
    /// `lora`, `bitfit`, `ia3` or `none`.
    pub kind: String,
    pub rank: usize,
    /// `A`, `F` or `AF`.
    pub targets: String,
    pub contexts: usize,
    pub context_specific: bool,
    /// `peft` or `full`.
    pub mode: String,
}

impl Default for AdaptorSection {
    fn default() -> Self {
        Self {
            kind: "lora".into(),
            rank: 4,
            targets: "AF".into(),
            contexts: 2,
            context_specific: true,
            mode: "peft".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub dropout_p: f32,
    pub eval_every: usize,
    /// 0 means no limit.
    pub max_steps: usize,
    /// Write a metrics row every this many steps.
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::toy(0);
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            dropout_p: t.dropout_p,
            eval_every: t.eval_every,
            max_steps: 0,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Synthetic scene count, used when `archive` is empty.
    pub scenes: usize,
    pub d_vis: usize,
    pub data_seed: u64,
    /// Dataset archive written by `synth-data`; overrides the synthetic settings.
    pub archive: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            scenes: 2000,
            d_vis: 128,
            data_seed: 0,
            archive: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub adaptor: AdaptorSection,
    pub train: TrainSection,
    pub data: DataSection,
}


impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.adaptor_spec()?;
        self.mode()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let vocab = Tokenizer::new().vocab_size();
        let m = &self.model;
        let mut c = match m.preset.as_str() {
            "toy" => ModelConfig::toy(vocab),
            "tiny" => ModelConfig::tiny(vocab),
            "paper" => ModelConfig::paper(),
            other => bail!("unknown model preset `{other}` (expected toy, tiny or paper)"),
        };
        if let Some(v) = m.d_model {
            c.d_model = v;
        }
        if let Some(v) = m.n_layers {
            c.n_layers = v;
        }
        if let Some(v) = m.n_heads {
            c.n_heads = v;
        }
        if let Some(v) = m.d_ffn_fused {
            c.d_ffn_fused = v;
        }
        if let Some(v) = m.d_ffn_inner {
            c.d_ffn_inner = v;
        }
        if let Some(v) = m.rope_base {
            c.rope_base = v;
        }
        if m.rope_abf_base.is_some() {
            c.rope_abf_base = m.rope_abf_base;
        }
        if let Some(v) = m.init_std {
            c.init_std = v;
        }
        c.dropout_p = self.train.dropout_p;
        c.validate()?;
        Ok(c)
    }

    /// `None` when `adaptor.kind = "none"` (only valid for full fine-tuning).
    pub fn adaptor_spec(&self) -> Result<Option<AdaptorSpec>> {
        let a = &self.adaptor;
        if a.kind == "none" {
            return Ok(None);
        }
        let kind = AdaptorKind::parse(&a.kind)?;
        let targets = Targets::parse(&a.targets)?;
        let spec = match kind {
            AdaptorKind::Lora => AdaptorSpec::lora(a.rank, targets, a.contexts, a.context_specific),
            AdaptorKind::BitFit => AdaptorSpec::bitfit(targets, a.contexts, a.context_specific),
            AdaptorKind::Ia3 => AdaptorSpec::ia3(targets, a.contexts, a.context_specific),
        };
        spec.validate()?;
        Ok(Some(spec))
    }

    pub fn mode(&self) -> Result<TrainMode> {
        match self.adaptor.mode.as_str() {
            "peft" => {
                if self.adaptor.kind == "none" {
                    bail!("peft mode needs an adaptor kind other than `none`");
                }
                Ok(TrainMode::Peft)
            }
            "full" => Ok(TrainMode::FullFineTune),
            other => bail!("unknown training mode `{other}` (expected peft or full)"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            dropout_p: t.dropout_p,
            seed: self.seed,
            eval_every: t.eval_every,
            max_steps: (t.max_steps > 0).then_some(t.max_steps),
        }
    }
}
