use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use super::adam::{adam_step, OptimizerState};
use super::captioner::{CaptionModel, Example};
use crate::adaptors::ContextId;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{logits_tape, DropoutCtx};
use crate::pipeline::{ImageEmbeddingSet, CAPTION_START, EOS, IMG, BOS, IMAGE_START, IMAGE_TOKENS, MAX_CAPTION};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub dropout_p: f32,
    pub seed: u64,
    /// Validate every this many steps as well as at epoch ends; 0 disables.
    pub eval_every: usize,
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    /// Batch 96, 8 epochs, Adam(1e-4, 0.9, 0.95), dropout 0.1.
    pub fn paper(seed: u64) -> Self {
        Self {
            batch_size: 96,
            epochs: 8,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            dropout_p: 0.1,
            seed,
            eval_every: 0,
            max_steps: None,
        }
    }

    /// Desk-scale defaults for the toy model.
    pub fn toy(seed: u64) -> Self {
        Self {
            batch_size: 4,
            epochs: 4,
            lr: 4e-3,
            ..Self::paper(seed)
        }
    }

    /// A zero learning rate is accepted so frozen dynamics can be checked.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-token training loss over the epoch's steps.
    pub train_loss: f64,
    pub val_nll: f64,
    pub val_ppl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainEvent {
    Step { epoch: usize, step: usize, loss: f64 },
    Eval { epoch: usize, step: usize, val_nll: f64, val_ppl: f64 },
    Epoch(EpochMetrics),
}

#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_nll: f64,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: OptimizerState,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub best: BestSnapshot,
    pub steps: usize,
    pub stopped_early: bool,
    /// Optimizer state after the last step.
    pub optimizer: OptimizerState,
}

fn seq_nll(logits: &[f32], targets: &[usize], v: usize) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.chunks(v).zip(targets) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
        let sum: f64 = row.iter().map(|&x| libm::exp(f64::from(x - max))).sum();
        total += libm::log(sum) - f64::from(row[t] - max);
    }
    total
}

/// Summed NLL and token count over the masked caption positions of one sequence.
fn example_nll(model: &CaptionModel, ex: &impl Example) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let (_, logits, layout) = model.sequence_loss(&mut tape, ex.embeddings(), ex.caption(), 1.0, None)?;
    let targets: Vec<usize> = layout.loss_positions().iter().map(|&r| layout.targets[r] as usize).collect();
    Ok((seq_nll(tape.value(logits), &targets, model.config().vocab_size), targets.len()))
}

/// Masked-token mean NLL in eval mode.
pub fn mean_nll<E: Example>(model: &CaptionModel, split: &[E]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Evaluation("cannot evaluate an empty split".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in split {
        let (nll, n) = example_nll(model, ex)?;
        total += nll;
        count += n;
    }
    Ok(total / count as f64)
}

/// `exp` of the masked-token mean NLL. Independent of order and batching.
pub fn perplexity<E: Example>(model: &CaptionModel, split: &[E]) -> Result<f64> {
    Ok(libm::exp(mean_nll(model, split)?))
}

/// Greedy decoding from the image until `[EOS]` or the caption budget.
pub fn generate(model: &CaptionModel, embeddings: &ImageEmbeddingSet, max_new: usize) -> Result<Vec<u32>> {
    let mut caption: Vec<u32> = Vec::new();
    let v = model.config().vocab_size;
    while caption.len() < max_new.min(MAX_CAPTION) {
        let mut ids = Vec::with_capacity(CAPTION_START + caption.len());
        ids.push(BOS);
        ids.extend(core::iter::repeat_n(IMG, IMAGE_TOKENS));
        ids.extend_from_slice(&caption);
        let ctx: Vec<ContextId> = (0..ids.len())
            .map(|i| {
                if (IMAGE_START..CAPTION_START).contains(&i) {
                    ContextId::IMAGE
                } else {
                    ContextId::TEXT
                }
            })
            .collect();
        let mut tape = Tape::new();
        let hidden = model.hidden(&mut tape, embeddings, &ids, &ctx, None)?;
        let logits = logits_tape(&mut tape, &model.weights, hidden, Some(&[ids.len() - 1]))?;
        let row = tape.value(logits);
        let next = (0..v).fold(0, |best, i| if row[i] > row[best] { i } else { best }) as u32;
        if next == EOS {
            break;
        }
        caption.push(next);
    }
    Ok(caption)
}

/// Runs `cfg.epochs` epochs of Adam over `train_set`, validating on
/// `val_set` after each epoch, and returns the per-epoch history with a
/// snapshot of the epoch with lowest validation NLL. The model is left at
/// its final state; restore the best one with [`CaptionModel::load_tensors`].
///
/// `observer` sees every event and may stop training by returning
/// `ControlFlow::Break`; a partial epoch is then still validated.
pub fn train<E: Example>(
    model: &mut CaptionModel,
    train_set: &[E],
    val_set: &[E],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&TrainEvent) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Training("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Evaluation("validation split is empty".into()));
    }
    if model.num_trainable() == 0 {
        return Err(Error::Training("model has no trainable tensors".into()));
    }
    let mut order_rng = rng::stream(cfg.seed, rng::STREAM_DATA_ORDER);
    let mut drop_rng = rng::stream(cfg.seed, rng::STREAM_DROPOUT);
    let mut state = OptimizerState::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestSnapshot> = None;
    let mut step = 0usize;
    let mut stop = false;

    for epoch in 0..cfg.epochs {
        let order = rng::permutation(&mut order_rng, train_set.len());
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let tokens: usize = batch
                .iter()
                .map(|&i| crate::pipeline::assemble_layout(&train_set[i].caption().tokens).loss_positions().len())
                .sum();
            let weight = 1.0 / tokens.max(1) as f32;
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let ex = &train_set[i];
                let grads = {
                    let mut tape = Tape::new();
                    let mut drop = DropoutCtx {
                        rng: &mut drop_rng,
                        p: cfg.dropout_p,
                    };
                    let (loss, _, _) = model.sequence_loss(&mut tape, ex.embeddings(), ex.caption(), weight, Some(&mut drop))?;
                    let value = tape.value(loss)[0];
                    if !value.is_finite() {
                        let ids: Vec<u64> = batch.iter().map(|&j| train_set[j].caption().image_id).collect();
                        return Err(Error::Training(format!(
                            "non-finite loss {value} at epoch {epoch}, step {step}, image {} (batch image ids {ids:?})",
                            ex.caption().image_id
                        )));
                    }
                    batch_loss += f64::from(value);
                    tape.backward(loss)?
                };
                let mut params = model.trainable_mut();
                for (name, g) in grads.named() {
                    if let Some((_, t)) = params.iter_mut().find(|(n, _)| n == name) {
                        t.accumulate_grad(g)?;
                    }
                }
            }
            adam_step(&mut model.trainable_mut(), &mut state, cfg)?;
            step += 1;
            epoch_loss += batch_loss;
            epoch_steps += 1;
            if observer(&TrainEvent::Step { epoch, step, loss: batch_loss }).is_break() {
                stop = true;
            }
            if !stop && cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every) {
                let val_nll = mean_nll(model, val_set)?;
                let ev = TrainEvent::Eval {
                    epoch,
                    step,
                    val_nll,
                    val_ppl: libm::exp(val_nll),
                };
                stop = observer(&ev).is_break();
            }
            if cfg.max_steps.is_some_and(|m| step >= m) {
                stop = true;
            }
            if stop {
                break;
            }
        }
        let val_nll = mean_nll(model, val_set)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: epoch_loss / epoch_steps.max(1) as f64,
            val_nll,
            val_ppl: libm::exp(val_nll),
        };
        history.push(metrics);
        if best.as_ref().is_none_or(|b| val_nll < b.val_nll) {
            best = Some(BestSnapshot {
                epoch,
                val_nll,
                tensors: model.trainable_snapshot(),
                optimizer: state.clone(),
            });
        }
        if observer(&TrainEvent::Epoch(metrics)).is_break() {
            stop = true;
        }
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        stopped_early: history.len() < cfg.epochs,
        history,
        best: best.expect("at least one epoch ran"),
        steps: step,
        optimizer: state,
    })
}
