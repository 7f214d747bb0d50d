use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

/// Adam moments keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub entries: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn step_count(&self) -> u64 {
        self.entries.values().map(|m| m.t).max().unwrap_or(0)
    }
}

/// One bias-corrected Adam update of every tensor in `params` that
/// requires grad, consuming its gradient. Frozen tensors are skipped.
pub fn adam_step(params: &mut [(String, &mut Tensor)], state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    for (name, p) in params.iter_mut() {
        if !p.requires_grad() {
            continue;
        }
        let g = p
            .take_grad()
            .ok_or_else(|| Error::Training(format!("trainable tensor `{name}` has no gradient")))?;
        let n = p.numel();
        let mom = state.entries.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        if mom.m.len() != n {
            return Err(Error::Training(format!("optimizer state for `{name}` has the wrong size")));
        }
        mom.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - libm::powf(b1, mom.t as f32);
        let bc2 = 1.0 - libm::powf(b2, mom.t as f32);
        for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(&g).zip(&mut mom.m).zip(&mut mom.v) {
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= cfg.lr * m_hat / (libm::sqrtf(v_hat) + cfg.adam_eps);
        }
    }
    Ok(())
}
