//! Checkpoints: trainable tensors, Adam moments and the full run
//! configuration in one tensor archive. PEFT checkpoints omit the frozen
//! base, which is regenerated from its seed and verified by hash.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ctxpeft_core::train::{Moments, OptimizerState};
use ctxpeft_core::{CaptionModel, Tensor, TrainMode, TransformerWeights};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub d_vis: usize,
    pub epoch: usize,
    pub val_nll: f64,
    pub base_hash: String,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: OptimizerState,
}

/// SHA-256 over every base tensor's name, shape and little-endian bytes.
pub fn base_hash(weights: &TransformerWeights) -> String {
    let mut h = Sha256::new();
    for (name, t) in weights.named_tensors() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds the untrained model a run configuration describes.
pub fn build_model(config: &RunConfig, d_vis: usize) -> Result<CaptionModel> {
    let spec = config.adaptor_spec()?;
    Ok(CaptionModel::new(
        &config.model_config()?,
        spec.as_ref(),
        config.mode()?,
        d_vis,
        config.model.base_seed,
        config.seed,
    )?)
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        model: &CaptionModel,
        tensors: Vec<(String, Tensor)>,
        optimizer: OptimizerState,
        epoch: usize,
        val_nll: f64,
    ) -> Self {
        Self {
            config: config.clone(),
            d_vis: model.d_vis(),
            epoch,
            val_nll,
            base_hash: base_hash(&model.weights),
            tensors,
            optimizer,
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.set_meta("kind", "checkpoint");
        a.set_meta("run_config", self.config.to_toml());
        a.set_meta("model_config", format!("{:?}", self.config.model_config().ok()));
        if let Ok(Some(spec)) = self.config.adaptor_spec() {
            a.set_meta("adaptor_spec", format!("{spec:?}"));
        }
        a.set_meta("d_vis", self.d_vis.to_string());
        a.set_meta("epoch", self.epoch.to_string());
        a.set_meta("val_nll", format!("{:?}", self.val_nll));
        a.set_meta("base_hash", self.base_hash.clone());
        for (name, t) in &self.tensors {
            a.push(format!("param.{name}"), t);
        }
        for (name, m) in &self.optimizer.entries {
            a.set_meta(format!("adam.t.{name}"), m.t.to_string());
            let n = m.m.len();
            a.push(format!("adam.m.{name}"), &Tensor::new(&[n], m.m.clone()).expect("flat"));
            a.push(format!("adam.v.{name}"), &Tensor::new(&[n], m.v.clone()).expect("flat"));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        ensure!(a.meta("kind")? == "checkpoint", "archive is not a checkpoint");
        let config = RunConfig::parse(a.meta("run_config")?).context("checkpoint run config")?;
        let mut tensors = Vec::new();
        let mut optimizer = OptimizerState::default();
        for (name, t) in &a.tensors {
            if let Some(p) = name.strip_prefix("param.") {
                tensors.push((p.to_string(), t.clone()));
            } else if let Some(p) = name.strip_prefix("adam.m.") {
                let v = a.get(&format!("adam.v.{p}")).with_context(|| format!("missing second moment for `{p}`"))?;
                let t_steps: u64 = a.meta(&format!("adam.t.{p}"))?.parse()?;
                optimizer.entries.insert(
                    p.to_string(),
                    Moments {
                        m: t.data().to_vec(),
                        v: v.data().to_vec(),
                        t: t_steps,
                    },
                );
            } else if !name.starts_with("adam.v.") {
                bail!("unexpected tensor `{name}` in checkpoint");
            }
        }
        Ok(Self {
            config,
            d_vis: a.meta("d_vis")?.parse()?,
            epoch: a.meta("epoch")?.parse()?,
            val_nll: a.meta("val_nll")?.parse()?,
            base_hash: a.meta("base_hash")?.to_string(),
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    /// Writes the stored tensors into `model`, which must have been built
    /// from an identical model and adaptor configuration.
    pub fn restore_into(&self, model: &mut CaptionModel) -> Result<()> {
        let want = self.config.model_config()?;
        ensure!(
            *model.config() == want,
            "checkpoint model config {want:?} does not match {:?}",
            model.config()
        );
        ensure!(
            model.adaptors.as_ref().map(|a| *a.spec()) == self.config.adaptor_spec()?,
            "checkpoint adaptor spec does not match the model"
        );
        ensure!(model.d_vis() == self.d_vis, "checkpoint image width {} differs from {}", self.d_vis, model.d_vis());
        if self.config.mode()? == TrainMode::Peft {
            ensure!(
                base_hash(&model.weights) == self.base_hash,
                "frozen base weights differ from the ones this checkpoint was trained on"
            );
        }
        model.load_tensors(&self.tensors)?;
        Ok(())
    }

    /// Rebuilds the model described by the checkpoint and restores it.
    pub fn into_model(&self) -> Result<CaptionModel> {
        let mut model = build_model(&self.config, self.d_vis)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }
}
