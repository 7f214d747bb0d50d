//! Shared helpers for the integration tests, including an independent
//! f64 re-implementation of the captioning forward pass.

#![allow(dead_code)]

use std::collections::BTreeMap;

use ctxpeft_core::pipeline::{assemble_layout, CAPTION_START, IMAGE_START};
use ctxpeft_core::{CaptionModel, CaptionRecord, ContextId, ImageEmbeddingSet, ModelConfig};

type Param = (Vec<usize>, Vec<f64>);

/// f64 copy of every tensor of a [`CaptionModel`], evaluated by plain loops.
pub struct RefModel {
    pub params: BTreeMap<String, Param>,
    pub cfg: ModelConfig,
    pub context_specific: bool,
}

fn matmul(x: &[f64], rows: usize, w: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for k in 0..d_in {
            let xv = x[r * d_in + k];
            for j in 0..d_out {
                out[r * d_out + j] += xv * w[k * d_out + j];
            }
        }
    }
    out
}

fn rms_norm(x: &[f64], d: usize, g: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + 1e-5).sqrt();
        for (v, s) in row.iter_mut().zip(g) {
            *v *= inv * s;
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl RefModel {
    pub fn new(m: &CaptionModel) -> Self {
        let params = m
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, (t.shape().to_vec(), t.data().iter().map(|&v| f64::from(v)).collect())))
            .collect();
        Self {
            params,
            cfg: *m.config(),
            context_specific: m.adaptors.as_ref().is_some_and(|a| a.spec().context_specific),
        }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.params.get(name).unwrap_or_else(|| panic!("no tensor {name}")).1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        &mut self.params.get_mut(name).unwrap_or_else(|| panic!("no tensor {name}")).1
    }

    fn opt(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    fn project(&self, x: &[f64], rows: usize, layer: usize, site: &str, groups: &[usize]) -> Vec<f64> {
        let w_name = format!("base.layers.{layer}.w_{site}");
        let (shape, w) = self.params.get(&w_name).unwrap();
        let (d_in, d_out) = (shape[0], shape[1]);
        let mut h = matmul(x, rows, w, d_in, d_out);
        let b = self.get(&format!("base.layers.{layer}.b_{site}"));
        for row in h.chunks_mut(d_out) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let pre = format!("adaptor.layers.{layer}.{site}");
        if let (Some((sa, a)), Some((_, bm))) = (self.opt(&format!("{pre}.lora_a")), self.opt(&format!("{pre}.lora_b"))) {
            let r = sa[2];
            for i in 0..rows {
                let g = groups[i];
                let a_g = &a[g * d_in * r..(g + 1) * d_in * r];
                let b_g = &bm[g * r * d_out..(g + 1) * r * d_out];
                let t = matmul(&x[i * d_in..(i + 1) * d_in], 1, a_g, d_in, r);
                let delta = matmul(&t, 1, b_g, r, d_out);
                for j in 0..d_out {
                    h[i * d_out + j] += delta[j];
                }
            }
        }
        if let Some((_, d)) = self.opt(&format!("{pre}.bitfit_delta")) {
            for i in 0..rows {
                for j in 0..d_out {
                    h[i * d_out + j] += d[groups[i] * d_out + j];
                }
            }
        }
        if let Some((_, s)) = self.opt(&format!("{pre}.ia3_scale")) {
            for i in 0..rows {
                for j in 0..d_out {
                    h[i * d_out + j] *= s[groups[i] * d_out + j];
                }
            }
        }
        h
    }

    fn rope(&self, x: &mut [f64], rows: usize) {
        let (dm, heads) = (self.cfg.d_model, self.cfg.n_heads);
        let dh = dm / heads;
        let base = f64::from(self.cfg.rope_abf_base.unwrap_or(self.cfg.rope_base));
        for pos in 0..rows {
            for h in 0..heads {
                for i in 0..dh / 2 {
                    let f = base.powf(-2.0 * i as f64 / dh as f64);
                    let (s, c) = (pos as f64 * f).sin_cos();
                    let o = pos * dm + h * dh + 2 * i;
                    let (a, b) = (x[o], x[o + 1]);
                    x[o] = a * c - b * s;
                    x[o + 1] = a * s + b * c;
                }
            }
        }
    }

    fn attention(&self, q: &[f64], k: &[f64], v: &[f64], rows: usize) -> Vec<f64> {
        let (dm, heads) = (self.cfg.d_model, self.cfg.n_heads);
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; rows * dm];
        for h in 0..heads {
            for i in 0..rows {
                let s: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|e| q[i * dm + h * dh + e] * k[j * dm + h * dh + e]).sum::<f64>() * scale)
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for (j, sj) in s.iter().enumerate() {
                    let p = (sj - m).exp() / z;
                    for e in 0..dh {
                        out[i * dm + h * dh + e] += p * v[j * dm + h * dh + e];
                    }
                }
            }
        }
        out
    }

    /// Final-normed hidden states for a full sequence.
    pub fn hidden(&self, emb: &ImageEmbeddingSet, token_ids: &[u32], ctx: &[ContextId]) -> Vec<f64> {
        let dm = self.cfg.d_model;
        let rows = token_ids.len();
        let groups: Vec<usize> = ctx
            .iter()
            .map(|c| if self.context_specific { c.index() } else { 0 })
            .collect();
        let table = self.get("base.token_embeddings");
        let (pshape, p) = self.params.get("image_projection").unwrap();
        let e: Vec<f64> = emb.tensor().data().iter().map(|&v| f64::from(v)).collect();
        let img = matmul(&e, 64, p, pshape[0], dm);
        let mut x = vec![0.0; rows * dm];
        for i in 0..rows {
            let src = if (IMAGE_START..CAPTION_START).contains(&i) {
                &img[(i - IMAGE_START) * dm..(i - IMAGE_START + 1) * dm]
            } else {
                let t = token_ids[i] as usize;
                &table[t * dm..(t + 1) * dm]
            };
            x[i * dm..(i + 1) * dm].copy_from_slice(src);
        }
        for l in 0..self.cfg.n_layers {
            let xn = rms_norm(&x, dm, self.get(&format!("base.layers.{l}.attn_norm")));
            let mut q = self.project(&xn, rows, l, "q", &groups);
            let mut k = self.project(&xn, rows, l, "k", &groups);
            let v = self.project(&xn, rows, l, "v", &groups);
            self.rope(&mut q, rows);
            self.rope(&mut k, rows);
            let a = self.attention(&q, &k, &v, rows);
            let o = self.project(&a, rows, l, "o", &groups);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let xn = rms_norm(&x, dm, self.get(&format!("base.layers.{l}.ffn_norm")));
            let u = self.project(&xn, rows, l, "up", &groups);
            let n = self.cfg.d_ffn_inner;
            let mut act = vec![0.0; rows * n];
            for i in 0..rows {
                for j in 0..n {
                    act[i * n + j] = silu(u[i * 2 * n + j]) * u[i * 2 * n + n + j];
                }
            }
            if let Some((_, s)) = self.opt(&format!("adaptor.layers.{l}.ffn_act.ia3_scale")) {
                for i in 0..rows {
                    for j in 0..n {
                        act[i * n + j] *= s[groups[i] * n + j];
                    }
                }
            }
            let f = self.project(&act, rows, l, "down", &groups);
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        rms_norm(&x, dm, self.get("base.final_norm"))
    }

    /// Summed NLL over the masked caption positions.
    pub fn nll(&self, emb: &ImageEmbeddingSet, caption: &CaptionRecord) -> f64 {
        let layout = assemble_layout(&caption.tokens);
        let h = self.hidden(emb, &layout.token_ids, &layout.context_ids);
        let (dm, vocab) = (self.cfg.d_model, self.cfg.vocab_size);
        let head = self.get("base.lm_head");
        let mut total = 0.0;
        for r in layout.loss_positions() {
            let logits = matmul(&h[r * dm..(r + 1) * dm], 1, head, dm, vocab);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
            total += z.ln() + m - logits[layout.targets[r] as usize];
        }
        total
    }
}
