//! Command-line entry point: data generation, pretraining, distillation,
//! baselines, evaluation and the numerical checks.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{Gate, Mode, Paths, RunConfig};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "opsdl", version, about = "On-policy self-distillation for long-context retrieval")]
pub struct Cli {
    /// Run everything on one thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the root seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; relative paths in the configuration resolve against it.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Opsdl,
    LongSft,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training corpus.
    GenData(Common),
    /// Supervised short-context pretraining, then the short/long gap gate.
    Pretrain(Common),
    /// Distillation or Long-SFT starting from the pretrained checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Defaults to the configuration's `mode`.
        #[arg(long, value_enum)]
        mode: Option<TrainMode>,
        /// Starting checkpoint; defaults to `<checkpoints>/base.ckpt`.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Retrieval accuracy sweep for one checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report name; defaults to the checkpoint file stem.
        #[arg(long)]
        name: Option<String>,
    },
    /// Base vs distilled vs Long-SFT table and short-context preservation.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        ours: Option<PathBuf>,
        #[arg(long)]
        sft: Option<PathBuf>,
    },
    /// Per-token advantages of one sampled rollout.
    Advantages {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        triplet: String,
        /// Index selecting the rollout's random stream.
        #[arg(long, default_value_t = 0)]
        rollout: u64,
    },
    /// Backprop against central finite differences on small random models.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        draws: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo check that advantage-weighted gradients are unbiased.
    EstimatorCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        states: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<serde_json::Value> {
    if cli.deterministic {
        // Ignore the error if a pool was already installed in this process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Pretrain(c) => commands::pretrain(&c),
        Command::Train { common, mode, init } => commands::train(&common, mode, init),
        Command::Eval {
            common,
            checkpoint,
            name,
        } => commands::eval(&common, &checkpoint, name),
        Command::Compare { common, base, ours, sft } => commands::compare(&common, base, ours, sft),
        Command::Advantages {
            common,
            checkpoint,
            triplet,
            rollout,
        } => commands::advantages(&common, &checkpoint, &triplet, rollout),
        Command::GradCheck { seed, draws, out } => commands::grad_check(seed, draws, out),
        Command::EstimatorCheck {
            seed,
            states,
            samples,
            out,
        } => commands::estimator_check(seed, states, samples, out),
    }
}

/// Runs the CLI and returns the process exit code. Success prints one JSON
/// summary line to stdout; failure prints one JSON error line to stderr.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let line = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{line}");
            e.exit_code()
        }
    }
}

fn gate_failed(msg: String) -> Error {
    Error::Gate(msg)
}
