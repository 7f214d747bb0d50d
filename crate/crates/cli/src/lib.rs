//! File formats, checkpoints and the command implementations behind the
//! `ctxpeft` binary.

pub mod archive;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod heatmap_export;
pub mod metrics;
