//! Line-oriented CSV metrics log. Lines starting with `#` echo the run
//! configuration; the rest is `epoch,step,split,loss,ppl`.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use ctxpeft_core::train::TrainEvent;

use crate::config::RunConfig;

pub const HEADER: &str = "epoch,step,split,loss,ppl";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    text: String,
    log_every: usize,
}

impl MetricsLog {
    pub fn new(config: &RunConfig) -> Self {
        let mut text = String::new();
        for line in config.to_toml().lines() {
            let _ = writeln!(text, "# {line}");
        }
        if let Ok(m) = config.model_config() {
            let _ = writeln!(text, "# resolved model = {m:?}");
        }
        let _ = writeln!(text, "{HEADER}");
        Self {
            text,
            log_every: config.train.log_every.max(1),
        }
    }

    fn row(&mut self, epoch: usize, step: usize, split: &str, loss: f64) {
        let _ = writeln!(self.text, "{epoch},{step},{split},{loss},{}", loss.exp());
    }

    pub fn record(&mut self, event: &TrainEvent) {
        match *event {
            TrainEvent::Step { epoch, step, loss } => {
                if step == 1 || step % self.log_every == 0 {
                    self.row(epoch, step, "train", loss);
                }
            }
            TrainEvent::Eval { epoch, step, val_nll, .. } => self.row(epoch, step, "val", val_nll),
            TrainEvent::Epoch(m) => {
                let _ = writeln!(self.text, "{},,epoch_train,{},{}", m.epoch, m.train_loss, m.train_loss.exp());
                let _ = writeln!(self.text, "{},,epoch_val,{},{}", m.epoch, m.val_nll, m.val_ppl);
            }
        }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.text).with_context(|| format!("writing {}", path.display()))
    }
}

/// One parsed data row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub epoch: usize,
    pub step: Option<usize>,
    pub split: String,
    pub loss: f64,
    pub ppl: f64,
}

pub fn parse(text: &str) -> Result<Vec<Row>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && *l != HEADER && !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            anyhow::ensure!(f.len() == 5, "malformed metrics row `{l}`");
            Ok(Row {
                epoch: f[0].parse()?,
                step: if f[1].is_empty() { None } else { Some(f[1].parse()?) },
                split: f[2].to_string(),
                loss: f[3].parse()?,
                ppl: f[4].parse()?,
            })
        })
        .collect()
}
