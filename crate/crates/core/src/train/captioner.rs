use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::adaptors::{attach, AdaptorParams, AdaptorSpec};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    embed_tokens, forward, forward_tape, init_model, logits_tape, AttentionTrace, DropoutCtx, ForwardOutput, ModelConfig,
    TransformerWeights,
};
use crate::pipeline::{
    assemble, assemble_layout, init_projection, project_images, project_images_tape, CaptionRecord, ImageEmbeddingSet, SequenceLayout,
    SyntheticSample,
};
use crate::tensor::Tensor;

/// A captioned image usable for training and evaluation.
pub trait Example {
    fn embeddings(&self) -> &ImageEmbeddingSet;
    fn caption(&self) -> &CaptionRecord;
}

impl Example for SyntheticSample {
    fn embeddings(&self) -> &ImageEmbeddingSet {
        &self.embeddings
    }
    fn caption(&self) -> &CaptionRecord {
        &self.caption
    }
}

impl Example for (ImageEmbeddingSet, CaptionRecord) {
    fn embeddings(&self) -> &ImageEmbeddingSet {
        &self.0
    }
    fn caption(&self) -> &CaptionRecord {
        &self.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Base frozen; adaptors and the image projection train.
    Peft,
    /// Every base tensor and the image projection train.
    FullFineTune,
}

/// Frozen (or fully trainable) transformer, optional adaptors and the
/// image projection `P`.
#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub weights: TransformerWeights,
    pub adaptors: Option<AdaptorParams>,
    pub projection: Tensor,
    pub mode: TrainMode,
}

impl CaptionModel {
    /// `base_seed` fixes the pretrained weights; `seed` drives adaptor and
    /// projection initialisation.
    pub fn new(
        config: &ModelConfig,
        spec: Option<&AdaptorSpec>,
        mode: TrainMode,
        d_vis: usize,
        base_seed: u64,
        seed: u64,
    ) -> Result<Self> {
        let weights = init_model(config, base_seed)?;
        Self::from_weights(weights, spec, mode, d_vis, seed)
    }

    pub fn from_weights(
        mut weights: TransformerWeights,
        spec: Option<&AdaptorSpec>,
        mode: TrainMode,
        d_vis: usize,
        seed: u64,
    ) -> Result<Self> {
        if d_vis == 0 {
            return Err(Error::Config("image embedding width must be positive".into()));
        }
        let adaptors = spec.map(|s| attach(s, &weights.config, seed)).transpose()?;
        weights.set_trainable(mode == TrainMode::FullFineTune);
        let projection = init_projection(d_vis, weights.config.d_model, weights.config.init_std, seed);
        Ok(Self {
            weights,
            adaptors,
            projection,
            mode,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn d_vis(&self) -> usize {
        self.projection.shape()[0]
    }

    /// Every tensor with its stable name: `base.*`, `adaptor.*`, `image_projection`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.weights.named_tensors();
        if let Some(a) = &self.adaptors {
            out.extend(a.named_tensors());
        }
        out.push((String::from("image_projection"), &self.projection));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.weights.named_tensors_mut();
        if let Some(a) = &mut self.adaptors {
            out.extend(a.named_tensors_mut());
        }
        out.push((String::from("image_projection"), &mut self.projection));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    /// Number of scalars that receive updates.
    pub fn num_trainable(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Copies of the trainable tensors, for best-epoch snapshots.
    pub fn trainable_snapshot(&self) -> Vec<(String, Tensor)> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, t)| {
                let mut c = t.clone();
                c.zero_grad();
                (n, c)
            })
            .collect()
    }

    /// Overwrites tensors by name. Unknown names and shape changes are errors.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let mut slots = self.named_tensors_mut();
        for (name, src) in tensors {
            let dst = slots
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("unknown tensor `{name}`")))?;
            if dst.1.shape() != src.shape() {
                return Err(Error::dim("load_tensors", dst.1.shape(), src.shape()));
            }
            dst.1.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Records one sequence on `tape` and returns `(loss, logits, layout)`,
    /// where `loss = weight · Σ NLL` over the masked caption positions and
    /// `logits` holds only those rows. Positions past the last scored row
    /// are not computed.
    pub fn sequence_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        embeddings: &'a ImageEmbeddingSet,
        caption: &CaptionRecord,
        weight: f32,
        dropout: Option<&mut DropoutCtx<'_>>,
    ) -> Result<(Var, Var, SequenceLayout)> {
        let layout = assemble_layout(&caption.tokens);
        let rows = layout.loss_positions();
        // Attention is causal, so the PAD tail cannot affect any scored row.
        let end = rows.last().map_or(layout.token_ids.len(), |&r| r + 1);
        let hidden = self.hidden(
            tape,
            embeddings,
            &layout.token_ids[..end],
            &layout.context_ids[..end],
            dropout,
        )?;
        let logits = logits_tape(tape, &self.weights, hidden, Some(&rows))?;
        let targets: Vec<usize> = rows.iter().map(|&r| layout.targets[r] as usize).collect();
        let loss = tape.cross_entropy(logits, &targets, weight)?;
        Ok((loss, logits, layout))
    }

    /// Eval-mode forward over the full 128-position sequence, with the
    /// attention trace when `trace` is set.
    pub fn forward_eval(&self, embeddings: &ImageEmbeddingSet, caption: &CaptionRecord, trace: bool) -> Result<ForwardOutput> {
        let block = project_images(embeddings, &self.projection, None)?;
        let seq = assemble(caption, block)?;
        forward(&self.weights, &seq, self.adaptors.as_ref(), trace)
    }

    pub fn attention_trace(&self, embeddings: &ImageEmbeddingSet, caption: &CaptionRecord) -> Result<AttentionTrace> {
        let out = self.forward_eval(embeddings, caption, true)?;
        out.trace.ok_or_else(|| Error::Contract("trace was not recorded".into()))
    }

    pub(crate) fn hidden<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        embeddings: &'a ImageEmbeddingSet,
        token_ids: &[u32],
        context_ids: &[crate::adaptors::ContextId],
        mut dropout: Option<&mut DropoutCtx<'_>>,
    ) -> Result<Var> {
        if embeddings.d_vis() != self.d_vis() {
            return Err(Error::dim("image embeddings", embeddings.tensor().shape(), self.projection.shape()));
        }
        let img = project_images_tape(tape, embeddings, &self.projection, dropout.as_deref_mut())?;
        let x0 = embed_tokens(tape, &self.weights, token_ids, Some(img))?;
        let out = forward_tape(tape, &self.weights, self.adaptors.as_ref(), x0, context_ids, dropout)?;
        Ok(out.hidden)
    }
}
