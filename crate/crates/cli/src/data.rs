//! Datasets and embedding archives.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ctxpeft_core::pipeline::{split_indices, synth_dataset, Tokenizer, IMAGE_TOKENS};
use ctxpeft_core::{CaptionRecord, ImageEmbeddingSet};

use crate::archive::Archive;
use crate::config::RunConfig;

pub type Pair = (ImageEmbeddingSet, CaptionRecord);

/// Captioned images with their seeded 90/5/5 split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<Pair>,
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl Dataset {
    pub fn new(pairs: Vec<Pair>, split_seed: u64) -> Result<Self> {
        ensure!(pairs.len() >= 3, "need at least 3 captioned images, got {}", pairs.len());
        let s = split_indices(pairs.len(), split_seed);
        let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect();
        Ok(Self {
            train: pick(&s.train),
            val: pick(&s.val),
            test: pick(&s.test),
            pairs,
        })
    }

    pub fn d_vis(&self) -> usize {
        self.pairs[0].0.d_vis()
    }

    pub fn split(&self, name: &str) -> Result<&[Pair]> {
        Ok(match name {
            "train" => &self.train,
            "val" => &self.val,
            "test" => &self.test,
            other => bail!("unknown split `{other}` (expected train, val or test)"),
        })
    }

    pub fn find(&self, image_id: u64) -> Result<&Pair> {
        self.pairs
            .iter()
            .find(|(_, c)| c.image_id == image_id)
            .with_context(|| format!("no image with id {image_id}"))
    }
}

/// The dataset a run configuration names: a dataset archive when
/// `data.archive` is set, else the synthetic scenes.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let pairs = if config.data.archive.is_empty() {
        synth_dataset(config.data.scenes, config.data.data_seed, config.data.d_vis)
            .into_iter()
            .map(|s| (s.embeddings, s.caption))
            .collect()
    } else {
        read_dataset(Path::new(&config.data.archive))?
    };
    Dataset::new(pairs, config.data.data_seed)
}

fn image_name(id: u64) -> String {
    format!("image.{id:010}")
}

pub fn dataset_archive(pairs: &[Pair]) -> Archive {
    let tok = Tokenizer::new();
    let mut a = Archive::new();
    a.set_meta("kind", "dataset");
    for (e, c) in pairs {
        a.push(image_name(c.image_id), e.tensor());
        a.set_meta(format!("caption.{:010}", c.image_id), tok.detokenize(&c.tokens));
    }
    a
}

pub fn read_dataset(path: &Path) -> Result<Vec<Pair>> {
    let a = Archive::read(path)?;
    let tok = Tokenizer::new();
    load_embeddings_from(&a)?
        .into_iter()
        .map(|(id, e)| {
            let text = a.meta(&format!("caption.{id:010}"))?;
            let tokens = tok.tokenize(text).with_context(|| format!("caption of image {id}"))?;
            Ok((e, CaptionRecord::new(id, tokens)))
        })
        .collect()
}

/// Every `image.<id>` tensor of an archive, ordered by image id.
pub fn load_embeddings(path: &Path) -> Result<Vec<(u64, ImageEmbeddingSet)>> {
    load_embeddings_from(&Archive::read(path)?)
}

pub fn load_embeddings_from(a: &Archive) -> Result<Vec<(u64, ImageEmbeddingSet)>> {
    let mut out = Vec::new();
    for (name, t) in &a.tensors {
        let Some(id) = name.strip_prefix("image.") else {
            continue;
        };
        let id: u64 = id.parse().with_context(|| format!("record `{name}` has a non-numeric image id"))?;
        if t.rank() != 2 || t.shape()[0] != IMAGE_TOKENS {
            bail!("record `{name}` has shape {:?}, expected [{IMAGE_TOKENS}, d_vis]", t.shape());
        }
        let set = ImageEmbeddingSet::new(t.clone()).with_context(|| format!("record `{name}`"))?;
        out.push((id, set));
    }
    out.sort_by_key(|(id, _)| *id);
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        bail!("image id {} appears twice", w[0].0);
    }
    if let Some((id, e)) = out.iter().find(|(_, e)| e.d_vis() != out[0].1.d_vis()) {
        bail!("record {id} has width {}, others have {}", e.d_vis(), out[0].1.d_vis());
    }
    Ok(out)
}
