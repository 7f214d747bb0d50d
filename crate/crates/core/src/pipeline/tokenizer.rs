use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Placeholder id at image positions; never embedded.
pub const IMG: u32 = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[BOS]", "[EOS]", "[IMG]"];

/// Closed word-level vocabulary of the synthetic captions.
const WORDS: &[&str] = &[
    // articles, connectives, prepositions
    "a", "an", "the", "and", "of", "with", "in", "on", "at", "to", "is", "are", "there", "next", "beside",
    "together", "plus", "as", "well", "near", "against", "over", "this", "here", "we", "see", "it", "has",
    // openers
    "photo", "image", "picture", "scene", "drawing", "showing", "shows", "contains", "view",
    // positions
    "top", "bottom", "left", "right", "corner", "side", "upper", "lower", "middle", "center",
    // sizes
    "small", "medium", "large", "tiny", "big", "huge",
    // textures
    "plain", "striped", "dotted", "checkered", "shiny", "matte", "fuzzy", "wooden",
    // colours
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "black", "white", "gray", "cyan",
    "magenta", "gold", "silver", "teal",
    // shapes
    "circle", "square", "triangle", "star", "heart", "diamond", "cross", "ring", "hexagon", "pentagon", "oval",
    "arrow", "moon", "cube",
    // backgrounds
    "grass", "sand", "water", "snow", "sky", "wood", "stone", "brick", "carpet", "paper", "metal", "glass",
    "marble", "tiles",
    // counts and extras
    "one", "two", "three", "object", "objects", "shape", "shapes", "background", "surface", "floor",
];

/// Whitespace tokenizer over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<&'static str>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut vocab: Vec<&'static str> = SPECIALS.to_vec();
        vocab.extend_from_slice(WORDS);
        Tokenizer { vocab }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.vocab.iter().position(|w| *w == word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&'static str> {
        self.vocab.get(id as usize).copied()
    }

    pub fn words(&self) -> &[&'static str] {
        &self.vocab[SPECIALS.len()..]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .filter(|&id| id as usize >= SPECIALS.len())
                    .ok_or_else(|| Error::Format(format!("word `{w}` is not in the vocabulary")))
            })
            .collect()
    }

    /// Joins word ids with single spaces; special ids are skipped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id as usize >= SPECIALS.len())
            .filter_map(|&id| self.word(id))
            .collect();
        words.join(" ")
    }
}
