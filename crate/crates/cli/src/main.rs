mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fgdiff::Error;

#[derive(Parser)]
#[command(name = "fgdiff", version, about = "Frequency-guided diffusion at desk scale")]
struct Cli {
    /// Parent directory for per-invocation run directories.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// Run configuration file (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural shape/texture dataset.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_super: Option<usize>,
        #[arg(long)]
        subs_per_super: Option<usize>,
        /// Samples per subclass.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; defaults to `dataset.efdd` in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a denoiser from scratch.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: commands::TrainArgs,
    },
    /// Fine-tune biases, norms and embeddings of an existing checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: commands::TrainArgs,
        /// Base checkpoint; it is read, never written.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Draw images with tiered guidance and frequency refinement.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sample: commands::SampleArgs,
    },
    /// Count dot products and time dense vs sparse attention over lengths.
    BenchAttention {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        bench: commands::BenchArgs,
    },
    /// Score generated samples against real data.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Real dataset file.
        #[arg(long)]
        data: PathBuf,
        /// Generated samples file written by `sample`.
        #[arg(long)]
        samples: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Format { .. } => 3,
        Error::Numeric(_) | Error::NonFinite { .. } => 4,
        Error::Contract(_) | Error::Dimension(_) => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData {
            common,
            n_super,
            subs_per_super,
            samples,
            seed,
            out,
        } => commands::generate_data(&cli.runs_dir, &common, n_super, subs_per_super, samples, seed, out),
        Command::Train { common, train } => commands::train(&cli.runs_dir, &common, &train, None),
        Command::Finetune {
            common,
            train,
            checkpoint,
        } => commands::train(&cli.runs_dir, &common, &train, Some(&checkpoint)),
        Command::Sample { common, sample } => commands::sample(&cli.runs_dir, &common, &sample),
        Command::BenchAttention { common, bench } => commands::bench_attention(&cli.runs_dir, &common, &bench),
        Command::Eval { common, data, samples } => commands::eval(&cli.runs_dir, &common, &data, &samples),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fgdiff: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
