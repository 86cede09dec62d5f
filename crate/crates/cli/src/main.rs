use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crc_cli::{cmd_eval, cmd_gradcheck, cmd_score, cmd_synth, cmd_train, exit, exit_code};

/// Causal representation consistency for unsupervised video anomaly detection.
#[derive(Parser)]
#[command(name = "crc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train video, test video and test labels.
    Synth {
        /// key=value file; `synth.`-prefixed keys set the spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint plus `<out>.loss.csv`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by `synth`, or a training video.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write per-frame raw and normalized scores as CSV.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional labels stored as an extra CSV column.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Print frame-level AUC and EER over all given score files.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        labels: Vec<PathBuf>,
        /// Also write the ROC curve as CSV.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Finite-difference check of the full loss on the tiny profile.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match &cli.command {
        Command::Synth { spec, out, seed } => cmd_synth(spec.as_deref(), out, *seed),
        Command::Train { config, data, out, resume, seed } => {
            cmd_train(config, data.as_deref(), out, resume.as_deref(), *seed)
        }
        Command::Score { ckpt, video, out, labels } => cmd_score(ckpt, video, out, labels.as_deref()),
        Command::Eval { scores, labels, roc } => cmd_eval(scores, labels, roc.as_deref()),
        Command::Gradcheck { seed } => cmd_gradcheck(*seed),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
