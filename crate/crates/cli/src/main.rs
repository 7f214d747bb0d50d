use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use ctxpeft::commands::{
    cmd_count_params, cmd_eval, cmd_generate, cmd_heatmap, cmd_synth_data, cmd_train, HeatmapRequest,
};
use ctxpeft::config::RunConfig;
use ctxpeft_core::pipeline::MAX_CAPTION;

#[derive(Parser)]
#[command(name = "ctxpeft", version, about = "Context-conditioned PEFT for image captioning")]
struct Cli {
    /// TOML run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train adaptors and the image projection; writes metrics and checkpoints.
    Train,
    /// Perplexity of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Trainable parameter counts, closed form checked against enumeration.
    CountParams {
        /// Report IA³, BitFit and LoRA r=1/8/64 on attention+FFN.
        #[arg(long)]
        table: bool,
    },
    /// Attention heatmap over the image patches for a caption span.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: u64,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Token span `start:end` within the caption region.
        #[arg(long, value_parser = parse_span)]
        span: Option<(usize, usize)>,
        /// Binary PPM to overlay the heatmap on.
        #[arg(long)]
        base_image: Option<PathBuf>,
        /// Embedding archive to read the image from instead of the checkpoint's dataset.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Greedy caption for one image.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: u64,
        #[arg(long, default_value_t = MAX_CAPTION)]
        max_new: usize,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset as a tensor archive.
    SynthData,
}

fn parse_span(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected start:end")?;
    let a = a.parse().map_err(|e| format!("{e}"))?;
    let b = b.parse().map_err(|e| format!("{e}"))?;
    Ok((a, b))
}

fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    match cli.command {
        Command::Train => {
            let r = cmd_train(&config, &cli.out)?;
            for m in &r.outcome.history {
                println!(
                    "epoch {} train_loss {:.4} val_nll {:.4} val_ppl {:.4}",
                    m.epoch, m.train_loss, m.val_nll, m.val_ppl
                );
            }
            println!(
                "best epoch {} (val_ppl {:.4}); wrote {}, {}",
                r.outcome.best.epoch,
                r.outcome.best.val_nll.exp(),
                r.metrics_path.display(),
                r.best_path.display()
            );
        }
        Command::Eval { checkpoint, split } => {
            println!("{split} ppl {}", cmd_eval(&checkpoint, &split)?);
        }
        Command::CountParams { table } => {
            print!("{}", cmd_count_params(&config, table)?.render());
        }
        Command::Heatmap {
            checkpoint,
            image,
            layer,
            span,
            base_image,
            embeddings,
        } => {
            let grid = cmd_heatmap(&HeatmapRequest {
                checkpoint: &checkpoint,
                image_id: image,
                layer,
                span,
                base_image: base_image.as_deref(),
                embeddings: embeddings.as_deref(),
                out: &cli.out,
            })?;
            print!("{}", ctxpeft::heatmap_export::grid_csv(&grid));
        }
        Command::Generate {
            checkpoint,
            image,
            max_new,
            embeddings,
        } => {
            println!("{}", cmd_generate(&checkpoint, image, max_new, embeddings.as_deref())?);
        }
        Command::SynthData => {
            println!("wrote {}", cmd_synth_data(&config, &cli.out)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
