use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rcyolo::pipeline::{self, PipelineError, RunConfig};

/// Recurrent YOLO pipeline: synthesize data, prepare clips, fit anchors,
/// train and evaluate.
#[derive(Debug, Parser)]
#[command(name = "rcyolo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment annotations into clips and write the train/val manifests.
    Prepare(Common),
    /// Fit nine anchor priors to the training labels.
    Anchors(Common),
    /// Train a detector and write checkpoints plus a loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on the validation clips.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Replay the ground truth instead of running a model.
        #[arg(long)]
        playback: bool,
        #[arg(long)]
        confidence_threshold: Option<f64>,
    },
    /// Generate a moving-squares dataset.
    Synth(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.paths.out = o.clone();
        }
        Ok(cfg)
    }
}

fn json_line(v: &impl serde::Serialize) -> String {
    serde_json::to_string(v).expect("reports serialize")
}

fn run(cli: Cli) -> Result<String, PipelineError> {
    Ok(match cli.command {
        Command::Prepare(c) => json_line(&pipeline::cmd_prepare(&c.load()?)?),
        Command::Anchors(c) => {
            let set = pipeline::cmd_anchors(&c.load()?)?;
            json_line(&set.iter().map(|(_, _, p)| p).collect::<Vec<_>>())
        }
        Command::Train { common, epochs } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            json_line(&pipeline::cmd_train(&cfg)?)
        }
        Command::Eval {
            common,
            checkpoint,
            playback,
            confidence_threshold,
        } => {
            let mut cfg = common.load()?;
            if checkpoint.is_some() {
                cfg.paths.checkpoint = checkpoint;
            }
            cfg.eval.playback |= playback;
            if confidence_threshold.is_some() {
                cfg.eval.confidence_threshold = confidence_threshold;
            }
            json_line(&pipeline::cmd_eval(&cfg)?)
        }
        Command::Synth(c) => {
            let cfg = c.load()?;
            pipeline::cmd_synth(&cfg)?;
            json_line(&serde_json::json!({ "out": cfg.paths.out }))
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {}", e.class(), msg.trim());
            ExitCode::from(2)
        }
    }
}
