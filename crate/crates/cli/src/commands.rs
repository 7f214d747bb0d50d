use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ctxpeft_core::adaptors::{count_enumerated, count_trainable, AdaptorSpec};
use ctxpeft_core::model::base_layout;
use ctxpeft_core::pipeline::{Tokenizer, CAPTION_START, MAX_CAPTION, SEQ_LEN};
use ctxpeft_core::train::{generate, perplexity, train, TrainOutcome};
use ctxpeft_core::{extract_heatmap, CaptionRecord, HeatmapGrid, ImageEmbeddingSet, ModelConfig, Targets};

use crate::checkpoint::{build_model, Checkpoint};
use crate::config::RunConfig;
use crate::data::{dataset_archive, load_dataset, load_embeddings};
use crate::heatmap_export::{export_heatmap, Pixmap};
use crate::metrics::MetricsLog;

pub struct TrainReport {
    pub outcome: TrainOutcome,
    pub metrics_path: PathBuf,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

/// Trains per `config`, writing `metrics.csv`, `best.ckpt`, `last.ckpt`
/// and `config.toml` into `out`.
pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<TrainReport> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data = load_dataset(config)?;
    let mut model = build_model(config, data.d_vis())?;
    let mut log = MetricsLog::new(config);
    let outcome = train(&mut model, &data.train, &data.val, &config.train_config(), &mut |e| {
        log.record(e);
        ControlFlow::Continue(())
    })?;
    let metrics_path = out.join("metrics.csv");
    log.write(&metrics_path)?;
    std::fs::write(out.join("config.toml"), config.to_toml())?;

    let best = &outcome.best;
    let best_path = out.join("best.ckpt");
    Checkpoint::capture(config, &model, best.tensors.clone(), best.optimizer.clone(), best.epoch, best.val_nll)
        .save(&best_path)?;
    let last = outcome.history.last().expect("history is never empty");
    let last_path = out.join("last.ckpt");
    Checkpoint::capture(
        config,
        &model,
        model.trainable_snapshot(),
        outcome.optimizer.clone(),
        last.epoch,
        last.val_nll,
    )
    .save(&last_path)?;
    Ok(TrainReport {
        outcome,
        metrics_path,
        best_path,
        last_path,
    })
}

/// Perplexity of a checkpoint on one split of its dataset.
pub fn cmd_eval(checkpoint: &Path, split: &str) -> Result<f64> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.into_model()?;
    let data = load_dataset(&ckpt.config)?;
    Ok(perplexity(&model, data.split(split)?)?)
}

fn image_for(ckpt: &Checkpoint, image_id: u64, embeddings: Option<&Path>) -> Result<(ImageEmbeddingSet, Option<CaptionRecord>)> {
    match embeddings {
        Some(path) => {
            let all = load_embeddings(path)?;
            let (_, e) = all
                .into_iter()
                .find(|(id, _)| *id == image_id)
                .with_context(|| format!("no image with id {image_id} in {}", path.display()))?;
            Ok((e, None))
        }
        None => {
            let data = load_dataset(&ckpt.config)?;
            let (e, c) = data.find(image_id)?;
            Ok((e.clone(), Some(c.clone())))
        }
    }
}

/// Greedy caption for one image.
pub fn cmd_generate(checkpoint: &Path, image_id: u64, max_new: usize, embeddings: Option<&Path>) -> Result<String> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.into_model()?;
    let (e, _) = image_for(&ckpt, image_id, embeddings)?;
    let ids = generate(&model, &e, max_new)?;
    Ok(Tokenizer::new().detokenize(&ids))
}

pub struct HeatmapRequest<'a> {
    pub checkpoint: &'a Path,
    pub image_id: u64,
    pub layer: usize,
    /// Caption token span; defaults to the whole caption.
    pub span: Option<(usize, usize)>,
    pub base_image: Option<&'a Path>,
    pub embeddings: Option<&'a Path>,
    pub out: &'a Path,
}

/// Traces the image with its caption (generated when none is known) and
/// writes `heatmap_l<layer>.csv`, plus a `.ppm` overlay given a base image.
pub fn cmd_heatmap(req: &HeatmapRequest<'_>) -> Result<HeatmapGrid> {
    let ckpt = Checkpoint::load(req.checkpoint)?;
    let model = ckpt.into_model()?;
    let (e, caption) = image_for(&ckpt, req.image_id, req.embeddings)?;
    let caption = match caption {
        Some(c) => c,
        None => CaptionRecord::new(req.image_id, generate(&model, &e, MAX_CAPTION)?),
    };
    let (s, end) = req
        .span
        .unwrap_or((CAPTION_START, (CAPTION_START + caption.tokens.len()).clamp(CAPTION_START + 1, SEQ_LEN)));
    let trace = model.attention_trace(&e, &caption)?;
    let grid = extract_heatmap(&trace, req.layer, s..end)?;
    let base = req.base_image.map(Pixmap::read).transpose()?;
    std::fs::create_dir_all(req.out)?;
    export_heatmap(&grid, base.as_ref(), req.out, &format!("heatmap_l{}", req.layer))?;
    Ok(grid)
}

/// Writes the configured synthetic dataset as a tensor archive.
pub fn cmd_synth_data(config: &RunConfig, out: &Path) -> Result<PathBuf> {
    ensure!(config.data.archive.is_empty(), "synth-data generates scenes; unset data.archive");
    std::fs::create_dir_all(out)?;
    let data = load_dataset(config)?;
    let path = out.join("dataset.ctxa");
    dataset_archive(&data.pairs).write(&path)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountRow {
    pub label: String,
    pub agnostic: usize,
    pub agnostic_enumerated: usize,
    pub specific: usize,
    pub specific_enumerated: usize,
}

impl CountRow {
    pub fn consistent(&self) -> bool {
        self.agnostic == self.agnostic_enumerated && self.specific == self.specific_enumerated
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountReport {
    pub rows: Vec<CountRow>,
    pub full_ft: usize,
}

impl CountReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>14} {:>14} {:>10}", "adaptor", "agnostic", "specific", "check");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:>14} {:>14} {:>10}",
                r.label,
                r.agnostic,
                r.specific,
                if r.consistent() { "ok" } else { "MISMATCH" }
            );
        }
        let _ = writeln!(s, "{:<16} {:>14}", "full-ft", self.full_ft);
        s
    }
}

fn count_row(label: String, make: impl Fn(bool) -> AdaptorSpec, config: &ModelConfig) -> Result<CountRow> {
    let (a, sp) = (make(false), make(true));
    Ok(CountRow {
        label,
        agnostic: count_trainable(&a, config),
        agnostic_enumerated: count_enumerated(&a, config)?,
        specific: count_trainable(&sp, config),
        specific_enumerated: count_enumerated(&sp, config)?,
    })
}

/// Closed-form and enumerated trainable counts. `table` lists IA³,
/// BitFit and LoRA r ∈ {1, 8, 64} on the AF targets; otherwise only the
/// configured adaptor is reported.
pub fn cmd_count_params(config: &RunConfig, table: bool) -> Result<CountReport> {
    let model = config.model_config()?;
    let c = config.adaptor.contexts;
    let mut rows = Vec::new();
    if table {
        let t = Targets::AF;
        rows.push(count_row("ia3-AF".into(), |s| AdaptorSpec::ia3(t, c, s), &model)?);
        rows.push(count_row("bitfit-AF".into(), |s| AdaptorSpec::bitfit(t, c, s), &model)?);
        for r in [1, 8, 64] {
            rows.push(count_row(format!("lora-{r}-AF"), |s| AdaptorSpec::lora(r, t, c, s), &model)?);
        }
    } else {
        let Some(spec) = config.adaptor_spec()? else {
            bail!("no adaptor configured; use --table or set adaptor.kind");
        };
        let label = spec.label().split_once('-').map_or(String::new(), |(_, l)| l.to_string());
        rows.push(count_row(label, |s| AdaptorSpec { context_specific: s, ..spec }, &model)?);
    }
    let full_ft = base_layout(&model).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let report = CountReport { rows, full_ft };
    if let Some(bad) = report.rows.iter().find(|r| !r.consistent()) {
        bail!("closed-form and enumerated counts disagree for {}: {bad:?}", bad.label);
    }
    Ok(report)
}
