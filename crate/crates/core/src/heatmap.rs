//! Attention heatmaps over the image patch grid.
//!
//! For a span of caption query rows, the attention paid to the 64 image
//! positions is summed over the span rows and over heads, then laid out on
//! the 8x8 patch grid in raster order.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::model::AttentionTrace;
use crate::pipeline::{CAPTION_START, GRID, IMAGE_START, IMAGE_TOKENS};

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    /// 64 values, row-major over the 8x8 patch grid.
    pub values: Vec<f32>,
    pub layer: usize,
    pub span: Range<usize>,
}

impl HeatmapGrid {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * GRID + col]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks(GRID)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn total(&self) -> f32 {
        self.values.iter().sum()
    }
}

/// Sums layer `layer` attention from query rows `span` onto the image
/// columns. The span must lie in the caption region `[65, L)`.
pub fn extract_heatmap(trace: &AttentionTrace, layer: usize, span: Range<usize>) -> Result<HeatmapGrid> {
    let t = trace.layers.get(layer).ok_or_else(|| {
        Error::Span(format!("layer {layer} not in a {}-layer trace", trace.layers.len()))
    })?;
    let s = t.shape();
    if s.len() != 3 || s[1] != s[2] || s[1] < CAPTION_START {
        return Err(Error::dim("extract_heatmap", s, &[0, CAPTION_START, CAPTION_START]));
    }
    let (heads, l) = (s[0], s[1]);
    if span.start >= span.end || span.end > l {
        return Err(Error::Span(format!("span {span:?} is empty or exceeds length {l}")));
    }
    if span.start < CAPTION_START {
        return Err(Error::Span(format!(
            "span {span:?} overlaps the image region {IMAGE_START}..{CAPTION_START}"
        )));
    }
    let mut values = alloc::vec![0.0f32; IMAGE_TOKENS];
    let data = t.data();
    for h in 0..heads {
        for row in span.clone() {
            let off = (h * l + row) * l + IMAGE_START;
            for (v, w) in values.iter_mut().zip(&data[off..off + IMAGE_TOKENS]) {
                *v += w;
            }
        }
    }
    Ok(HeatmapGrid { values, layer, span })
}
