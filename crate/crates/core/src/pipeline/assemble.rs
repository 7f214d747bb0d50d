use alloc::format;
use alloc::vec::Vec;

use super::tokenizer::{BOS, EOS, IMG, PAD};
use super::{CAPTION_START, IMAGE_START, IMAGE_TOKENS, MAX_CAPTION, SEQ_LEN};
use crate::adaptors::ContextId;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::DropoutCtx;
use crate::rng;
use crate::tensor::Tensor;

/// The 64 encoder embeddings of one image, `[64, d_vis]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbeddingSet {
    embeddings: Tensor,
}

impl ImageEmbeddingSet {
    pub fn new(embeddings: Tensor) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != IMAGE_TOKENS {
            return Err(Error::Format(format!(
                "image embeddings must be [{IMAGE_TOKENS}, d_vis], got {:?}",
                embeddings.shape()
            )));
        }
        if !embeddings.all_finite() {
            return Err(Error::Format("image embeddings contain non-finite values".into()));
        }
        Ok(ImageEmbeddingSet { embeddings })
    }

    pub fn d_vis(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.embeddings
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image_id: u64,
    /// Word ids, at most 63.
    pub tokens: Vec<u32>,
}

impl CaptionRecord {
    /// Truncates `tokens` to the caption budget.
    pub fn new(image_id: u64, mut tokens: Vec<u32>) -> Self {
        tokens.truncate(MAX_CAPTION);
        CaptionRecord { image_id, tokens }
    }
}

/// Everything about a sequence except the projected image block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub token_ids: Vec<u32>,
    pub context_ids: Vec<ContextId>,
    /// True where `targets[i]` is a caption word or `[EOS]`.
    pub loss_mask: Vec<bool>,
    /// Next-token targets; `targets[i]` is the token after position `i`.
    pub targets: Vec<u32>,
    /// Caption words kept.
    pub caption_len: usize,
    pub truncated: bool,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Positions contributing to the loss, ascending.
    pub fn loss_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.loss_mask[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSequence {
    pub token_ids: Vec<u32>,
    pub context_ids: Vec<ContextId>,
    pub loss_mask: Vec<bool>,
    pub targets: Vec<u32>,
    /// Projected image block `[64, d_model]`.
    pub image_block: Tensor,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Lays out `[BOS] [IMG]*64 caption [EOS] [PAD]*` over 128 positions.
///
/// A caption of the full 63 words leaves no slot for `[EOS]`; it then only
/// appears as the target of the last position, so every caption still
/// trains its end-of-sequence prediction.
pub fn assemble_layout(caption: &[u32]) -> SequenceLayout {
    let truncated = caption.len() > MAX_CAPTION;
    let caption = &caption[..caption.len().min(MAX_CAPTION)];
    let n = caption.len();
    let mut stream = Vec::with_capacity(SEQ_LEN + 1);
    stream.push(BOS);
    stream.extend(core::iter::repeat_n(IMG, IMAGE_TOKENS));
    stream.extend_from_slice(caption);
    stream.push(EOS);
    stream.resize(SEQ_LEN + 1, PAD);
    let targets: Vec<u32> = stream[1..].to_vec();
    stream.truncate(SEQ_LEN);
    let context_ids = (0..SEQ_LEN)
        .map(|i| {
            if (IMAGE_START..CAPTION_START).contains(&i) {
                ContextId::IMAGE
            } else {
                ContextId::TEXT
            }
        })
        .collect();
    let loss_mask = (0..SEQ_LEN)
        .map(|i| i + 1 >= CAPTION_START && targets[i] != PAD)
        .collect();
    SequenceLayout {
        token_ids: stream,
        context_ids,
        loss_mask,
        targets,
        caption_len: n,
        truncated,
    }
}

/// Combines a caption with its projected image block.
pub fn assemble(caption: &CaptionRecord, image_block: Tensor) -> Result<AssembledSequence> {
    if image_block.rank() != 2 || image_block.shape()[0] != IMAGE_TOKENS {
        return Err(Error::dim("assemble", image_block.shape(), &[IMAGE_TOKENS, 0]));
    }
    let l = assemble_layout(&caption.tokens);
    Ok(AssembledSequence {
        token_ids: l.token_ids,
        context_ids: l.context_ids,
        loss_mask: l.loss_mask,
        targets: l.targets,
        image_block,
    })
}

/// Trainable linear map from encoder width to model width, no bias.
pub fn init_projection(d_vis: usize, d_model: usize, std: f32, seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, rng::STREAM_PROJECTION);
    rng::normal_tensor(&mut rng, &[d_vis, d_model], std).with_grad()
}

/// `dropout(e)·P` on a tape. Dropout is skipped when `dropout` is `None`.
pub fn project_images_tape<'a>(
    tape: &mut Tape<'a>,
    e: &'a ImageEmbeddingSet,
    p: &'a Tensor,
    dropout: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    if p.rank() != 2 || p.shape()[0] != e.d_vis() {
        return Err(Error::dim("project_images", e.tensor().shape(), p.shape()));
    }
    let mut x = tape.param(e.tensor());
    if let Some(d) = dropout {
        x = d.apply(tape, x)?;
    }
    let pv = tape.param_named(|| "image_projection".into(), p);
    tape.matmul(x, pv)
}

/// Eager projection; pass a dropout source only in training mode.
pub fn project_images(e: &ImageEmbeddingSet, p: &Tensor, dropout: Option<&mut DropoutCtx<'_>>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = project_images_tape(&mut tape, e, p, dropout)?;
    Ok(tape.to_tensor(v))
}

/// Seeded 90/5/5 partition of `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, seed: u64) -> DatasetSplit {
    let mut rng = rng::stream(seed, rng::STREAM_SPLIT);
    let order = rng::permutation(&mut rng, n);
    let n_val = (n / 20).max(usize::from(n >= 3));
    let n_test = n_val;
    let n_train = n - n_val - n_test;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    DatasetSplit { train, val, test }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_word_caption_masks_six() {
        let l = assemble_layout(&[10, 11, 12, 13, 14]);
        assert_eq!(l.loss_mask.iter().filter(|&&m| m).count(), 6);
        assert_eq!(l.token_ids[CAPTION_START + 5], EOS);
        assert_eq!(l.targets[CAPTION_START + 4], EOS);
    }

    #[test]
    fn empty_caption_masks_eos_only() {
        let l = assemble_layout(&[]);
        assert_eq!(l.loss_positions(), vec![IMAGE_TOKENS]);
        assert_eq!(l.targets[IMAGE_TOKENS], EOS);
    }

    #[test]
    fn long_caption_truncates() {
        let cap: Vec<u32> = (0..70).map(|i| 10 + i % 50).collect();
        let l = assemble_layout(&cap);
        assert!(l.truncated);
        assert_eq!(l.len(), SEQ_LEN);
        assert_eq!(l.caption_len, 63);
        assert_eq!(l.targets[SEQ_LEN - 1], EOS);
        assert_eq!(CaptionRecord::new(0, cap).tokens.len(), 63);
    }

    #[test]
    fn rejects_wrong_row_count() {
        assert!(ImageEmbeddingSet::new(Tensor::zeros(&[63, 8])).is_err());
        assert_eq!(ImageEmbeddingSet::new(Tensor::zeros(&[64, 768])).unwrap().d_vis(), 768);
    }

    #[test]
    fn projection_cases() {
        let e = ImageEmbeddingSet::new(crate::rng::normal_tensor(&mut crate::rng::seeded(1), &[64, 8], 1.0)).unwrap();
        let zero = project_images(&e, &Tensor::zeros(&[8, 4]), None).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let same = project_images(&e, &Tensor::eye(8), None).unwrap();
        assert_eq!(same.data(), e.tensor().data());
        assert!(project_images(&e, &Tensor::zeros(&[7, 4]), None).is_err());
    }

    #[test]
    fn split_is_partition() {
        let s = split_indices(2000, 3);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1800, 100, 100));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
    }
}
