//! Synthetic captioning data: a 2x2 grid of optional coloured shapes on a
//! background, a deterministic 64-patch embedding and a templated caption.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::assemble::{CaptionRecord, ImageEmbeddingSet};
use super::tokenizer::Tokenizer;
use super::{GRID, IMAGE_TOKENS};
use crate::rng::{self, DetRng};
use crate::tensor::Tensor;

pub const COLORS: [&str; 16] = [
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "black", "white", "gray", "cyan",
    "magenta", "gold", "silver", "teal",
];
pub const SHAPES: [&str; 14] = [
    "circle", "square", "triangle", "star", "heart", "diamond", "cross", "ring", "hexagon", "pentagon", "oval",
    "arrow", "moon", "cube",
];
pub const TEXTURES: [&str; 8] = ["plain", "striped", "dotted", "checkered", "shiny", "matte", "fuzzy", "wooden"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];
pub const BACKGROUNDS: [&str; 14] = [
    "grass", "sand", "water", "snow", "sky", "wood", "stone", "brick", "carpet", "paper", "metal", "glass",
    "marble", "tiles",
];
const OPENERS: [&str; 6] = [
    "a photo of",
    "an image showing",
    "a picture of",
    "this scene has",
    "here is",
    "we see",
];
const CONNECTORS: [&str; 6] = ["and", "next to", "beside", "together with", "plus", "as well as"];
const CELL_NAMES: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];

/// Fixed seed of the stand-in image encoder; independent of dataset seeds.
const CODEBOOK_SEED: u64 = 0x5eed_c0de;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub texture: usize,
    pub size: usize,
}

pub type Cell = Option<SceneObject>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Background(pub usize);

/// Raster-ordered 2x2 grid of cells plus scene-wide attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SyntheticScene {
    pub cells: [Cell; 4],
    pub background: Background,
    /// Selects the opener and connector phrasing.
    pub style: usize,
}

/// Random feature vectors standing in for a frozen vision encoder.
#[derive(Debug, Clone)]
pub struct Codebook {
    d_vis: usize,
    colors: Vec<Vec<f32>>,
    shapes: Vec<Vec<f32>>,
    textures: Vec<Vec<f32>>,
    sizes: Vec<Vec<f32>>,
    backgrounds: Vec<Vec<f32>>,
    styles: Vec<Vec<f32>>,
    positions: Vec<Vec<f32>>,
}

impl Codebook {
    pub fn new(d_vis: usize) -> Self {
        let mut rng = rng::stream(CODEBOOK_SEED, rng::STREAM_CODEBOOK);
        let mut table = |n: usize, std: f32| -> Vec<Vec<f32>> {
            (0..n).map(|_| rng::normal_vec(&mut rng, d_vis, std)).collect()
        };
        Codebook {
            d_vis,
            colors: table(COLORS.len(), 1.0),
            shapes: table(SHAPES.len(), 1.0),
            textures: table(TEXTURES.len(), 1.0),
            sizes: table(SIZES.len(), 1.0),
            backgrounds: table(BACKGROUNDS.len(), 1.0),
            styles: table(OPENERS.len(), 1.0),
            positions: table(IMAGE_TOKENS, 0.5),
        }
    }

    pub fn d_vis(&self) -> usize {
        self.d_vis
    }
}

fn covers(cell: usize, size: usize, row: usize, col: usize) -> bool {
    let (r0, c0) = ((cell / 2) * GRID / 2, (cell % 2) * GRID / 2);
    let (lo, hi) = match size {
        0 => (1, 3),
        1 => (1, 4),
        _ => (0, 4),
    };
    (r0 + lo..r0 + hi).contains(&row) && (c0 + lo..c0 + hi).contains(&col)
}

impl SyntheticScene {
    pub fn random(rng: &mut DetRng) -> Self {
        let n_objects = rng.random_range(1..=2);
        let mut cells = [None; 4];
        let mut free: Vec<usize> = (0..4).collect();
        for _ in 0..n_objects {
            let cell = free.remove(rng.random_range(0..free.len()));
            cells[cell] = Some(SceneObject {
                shape: rng.random_range(0..SHAPES.len()),
                color: rng.random_range(0..COLORS.len()),
                texture: rng.random_range(0..TEXTURES.len()),
                size: rng.random_range(0..SIZES.len()),
            });
        }
        SyntheticScene {
            cells,
            background: Background(rng.random_range(0..BACKGROUNDS.len())),
            style: rng.random_range(0..OPENERS.len()),
        }
    }

    /// Templated caption, objects listed in raster order.
    pub fn caption(&self) -> String {
        let mut words: Vec<&str> = OPENERS[self.style].split(' ').collect();
        let mut first = true;
        for (i, cell) in self.cells.iter().enumerate() {
            let Some(obj) = cell else { continue };
            if !first {
                words.extend(CONNECTORS[self.style].split(' '));
            }
            first = false;
            words.extend([
                "a",
                SIZES[obj.size],
                TEXTURES[obj.texture],
                COLORS[obj.color],
                SHAPES[obj.shape],
                "at",
                "the",
            ]);
            words.extend(CELL_NAMES[i].split(' '));
        }
        words.extend(["on", "the", BACKGROUNDS[self.background.0]]);
        words.join(" ")
    }

    /// 64 raster-ordered patch embeddings; a pure function of the scene.
    pub fn embed(&self, book: &Codebook) -> ImageEmbeddingSet {
        let d = book.d_vis;
        let mut data = Vec::with_capacity(IMAGE_TOKENS * d);
        for p in 0..IMAGE_TOKENS {
            let (row, col) = (p / GRID, p % GRID);
            let mut v: Vec<f32> = book.backgrounds[self.background.0]
                .iter()
                .zip(&book.styles[self.style])
                .zip(&book.positions[p])
                .map(|((b, s), q)| b + 0.5 * s + q)
                .collect();
            for (cell, obj) in self.cells.iter().enumerate() {
                let Some(obj) = obj else { continue };
                if !covers(cell, obj.size, row, col) {
                    continue;
                }
                for (j, x) in v.iter_mut().enumerate() {
                    *x += book.colors[obj.color][j]
                        + book.shapes[obj.shape][j]
                        + book.textures[obj.texture][j]
                        + book.sizes[obj.size][j];
                }
            }
            data.extend(v);
        }
        ImageEmbeddingSet::new(Tensor::new(&[IMAGE_TOKENS, d], data).expect("patch grid shape"))
            .expect("synthetic embeddings are valid")
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub scene: SyntheticScene,
    pub embeddings: ImageEmbeddingSet,
    pub caption: CaptionRecord,
    pub text: String,
}

/// `n` scenes drawn from `seed`, embedded at width `d_vis`.
pub fn synth_dataset(n: usize, seed: u64, d_vis: usize) -> Vec<SyntheticSample> {
    let tok = Tokenizer::new();
    let book = Codebook::new(d_vis);
    let mut rng = rng::stream(seed, rng::STREAM_SCENES);
    (0..n)
        .map(|i| {
            let scene = SyntheticScene::random(&mut rng);
            let text = scene.caption();
            let ids = tok.tokenize(&text).expect("template words are in the vocabulary");
            SyntheticSample {
                scene,
                embeddings: scene.embed(&book),
                caption: CaptionRecord::new(i as u64, ids),
                text,
            }
        })
        .collect()
}
