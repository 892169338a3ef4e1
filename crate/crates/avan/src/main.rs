//! `avan` — adversarial visual-attention pipeline on paired image/recording
//! data. Thin argument shell; all behavior lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use avan::cli::commands::{
    cmd_eval, cmd_gen, cmd_infer, cmd_pretrain, cmd_sweep_delay, cmd_train, EvalArgs, EvalMetric,
    InferArgs, SweepArgs, TrainArgs,
};
use avan::cli::config::RunConfig;
use avan::{Error, Result};

#[derive(Parser)]
#[command(name = "avan", version, about = "Decode visual attention from brain recordings")]
struct Cli {
    /// Key-value run configuration file; defaults apply for absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the configuration file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a benchmark dataset directory.
    Gen {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the recording autoencoder on every subject's volumes.
    Pretrain {
        /// Dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for the checkpoint and loss log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the attention model on one subject's paired samples.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Subject index within the dataset.
        #[arg(long, default_value_t = 0)]
        subject: usize,
        /// Warm-start the recording encoder from a pretrained autoencoder.
        #[arg(long)]
        autoencoder: Option<PathBuf>,
        /// Continue training from a saved model checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total step budget, overriding the configuration's `steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write attended/neglected/overlay images for chosen frames.
    Infer {
        #[arg(long)]
        dataset: PathBuf,
        /// Trained model checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        subject: usize,
        /// Frame indices to render.
        #[arg(long, value_delimiter = ',', required = true)]
        frames: Vec<usize>,
        /// group: shared attention mask; individual: relational map against
        /// the subject's own recording.
        #[arg(long, default_value = "group")]
        mode: String,
    },
    /// Report hit rates, relation statistics, or extracted networks.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        subject: usize,
        /// hitrate, stats, or networks.
        #[arg(long)]
        metric: String,
    },
    /// Train one model per assumed response delay and rank them.
    SweepDelay {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        subject: usize,
        /// Shared autoencoder warm start for every delay's model.
        #[arg(long)]
        autoencoder: Option<PathBuf>,
        /// Delays in seconds, e.g. `0,2,4,6`; defaults to the configuration.
        #[arg(long, value_delimiter = ',')]
        delays: Option<Vec<f64>>,
    },
}

fn worker_cap() -> Result<usize> {
    match std::env::var("AVAN_THREADS") {
        Ok(raw) => match raw.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::usage(format!(
                "AVAN_THREADS must be a positive integer, got `{raw}`"
            ))),
        },
        Err(_) => Ok(1),
    }
}

fn run(cli: Cli) -> Result<()> {
    // Compute is single-threaded; the cap is validated so configuration
    // mistakes surface even though 1..=N workers all behave identically.
    let _workers = worker_cap()?;
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    match &cli.command {
        Command::Gen { out } => cmd_gen(&cfg, seed, out),
        Command::Pretrain { dataset, out } => cmd_pretrain(&cfg, seed, dataset, out),
        Command::Train { dataset, out, subject, autoencoder, resume, steps } => cmd_train(
            &cfg,
            seed,
            &TrainArgs {
                dataset,
                out,
                subject: *subject,
                autoencoder: autoencoder.as_deref(),
                resume: resume.as_deref(),
                steps: *steps,
            },
        ),
        Command::Infer { dataset, model, out, subject, frames, mode } => {
            let individual = match mode.as_str() {
                "group" => false,
                "individual" => true,
                other => {
                    return Err(Error::usage(format!(
                        "unknown mode `{other}`; expected group or individual"
                    )))
                }
            };
            cmd_infer(
                &cfg,
                &InferArgs { dataset, model, out, subject: *subject, frames, individual },
            )
        }
        Command::Eval { dataset, model, out, subject, metric } => cmd_eval(
            &cfg,
            &EvalArgs {
                dataset,
                model,
                out,
                subject: *subject,
                metric: EvalMetric::parse(metric)?,
            },
        ),
        Command::SweepDelay { dataset, out, subject, autoencoder, delays } => cmd_sweep_delay(
            &cfg,
            seed,
            &SweepArgs {
                dataset,
                out,
                subject: *subject,
                autoencoder: autoencoder.as_deref(),
                delays: delays.clone(),
            },
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
