use std::path::PathBuf;

use clap::{Parser, Subcommand};
use duogan_cli::{
    cmd_eval, cmd_generate, cmd_inspect, cmd_oracle, cmd_train, EvalArgs, GenerateArgs,
    InspectArgs, OracleArgs,
};

/// Train, generate, evaluate, and inspect paired-digit GANs.
#[derive(Parser)]
#[command(name = "duogan", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) a training job described by a config file
    Train {
        /// Flat key = value run configuration
        #[arg(long)]
        config: PathBuf,
        /// Validate the config, build the models, run one step, write nothing
        #[arg(long)]
        dry_run: bool,
        /// Continue from a checkpoint written by an identical config
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample images from a checkpoint under a fixed condition
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated class names or indices, e.g. "3,7"
        #[arg(long)]
        classes: String,
        #[arg(long, default_value_t = 36)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for sample-NNN.pgm tiles and grid.pgm
        #[arg(long)]
        out: PathBuf,
        /// Schema file for resolving class names
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Score a checkpoint for diversity, duplication, and adherence
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Oracle classifier file written by `duogan oracle`
        #[arg(long)]
        oracle: PathBuf,
        /// Number of samples to score
        #[arg(long, default_value_t = 150)]
        n: usize,
        /// Output directory for report.txt and report.kv
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the half-image digit classifier `eval` scores with
    Oracle {
        /// IDX image file of single 28x28 digits
        #[arg(long)]
        images: PathBuf,
        /// Matching IDX label file
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output oracle file
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize telemetry logs and checkpoint metadata
    Inspect {
        /// Telemetry file written by `duogan train`
        #[arg(long)]
        telemetry: Option<PathBuf>,
        /// Checkpoint file to describe
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Epoch length for grouping telemetry (default: the whole log)
        #[arg(long)]
        steps_per_epoch: Option<usize>,
        /// Flag steps where |mean_beta| exceeds this multiple of the running median
        #[arg(long, default_value_t = 5.0)]
        spike_multiple: f32,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            dry_run,
            resume,
        } => cmd_train(&config, dry_run, resume.as_deref()),
        Command::Generate {
            checkpoint,
            classes,
            count,
            seed,
            out,
            schema,
        } => cmd_generate(&GenerateArgs {
            checkpoint,
            classes,
            count,
            seed,
            out,
            schema,
        }),
        Command::Eval {
            checkpoint,
            oracle,
            n,
            out,
        } => cmd_eval(&EvalArgs {
            checkpoint,
            oracle,
            n,
            out,
        }),
        Command::Oracle {
            images,
            labels,
            seed,
            out,
        } => cmd_oracle(&OracleArgs {
            images,
            labels,
            seed,
            out,
        }),
        Command::Inspect {
            telemetry,
            checkpoint,
            steps_per_epoch,
            spike_multiple,
        } => cmd_inspect(&InspectArgs {
            telemetry,
            checkpoint,
            steps_per_epoch,
            spike_multiple,
        }),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
