//! Input sequence construction for image captioning:
//! `[BOS] + 64 projected image embeddings + caption + [EOS] + [PAD]*`,
//! always 128 positions.

mod assemble;
mod synth;
mod tokenizer;

pub use assemble::{
    assemble, assemble_layout, init_projection, project_images, project_images_tape, split_indices,
    AssembledSequence, CaptionRecord, DatasetSplit, ImageEmbeddingSet, SequenceLayout,
};
pub use synth::{synth_dataset, Background, Cell, SceneObject, SyntheticSample, SyntheticScene, COLORS, SHAPES};
pub use tokenizer::{Tokenizer, BOS, EOS, IMG, PAD};

/// Fixed context length.
pub const SEQ_LEN: usize = 128;
/// Embeddings produced per image.
pub const IMAGE_TOKENS: usize = 64;
/// First image position (position 0 holds `[BOS]`).
pub const IMAGE_START: usize = 1;
/// First caption position.
pub const CAPTION_START: usize = IMAGE_START + IMAGE_TOKENS;
/// Longest caption kept after truncation.
pub const MAX_CAPTION: usize = SEQ_LEN - CAPTION_START;
/// Side of the square patch grid.
pub const GRID: usize = 8;
