//! `dydit`: train, compile, sample, profile, and analyze width/token-gated
//! diffusion transformers from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{AnalyzeInputs, AnalyzeMode, WidthChoice};
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "dydit",
    version,
    about = "Diffusion transformer with per-timestep width and per-token depth gating"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Configuration file of key=value lines (model.*, diffusion.*, train.*,
    /// data.*, sampler.*, sample.*, profile.*)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed for every random draw the command makes
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn config(&self) -> anyhow::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic shapes dataset container
    Dataset {
        #[command(flatten)]
        common: Common,
        /// Output container file
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Train a denoiser (gated or full-width) on a dataset
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory for checkpoint.dydt and train.log
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Freeze per-timestep width decisions into a schedule file
    Compile {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint to read
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Output schedule file
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Denoise a batch of images from noise
    Sample {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint to read
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Precompiled schedule of width decisions
        #[arg(long, value_name = "FILE", conflicts_with_all = ["live", "full_width"])]
        schedule: Option<PathBuf>,
        /// Run the width routers at every step instead of a schedule
        #[arg(long, conflicts_with = "full_width")]
        live: bool,
        /// Keep every head and channel group on (static baseline)
        #[arg(long = "static")]
        full_width: bool,
        /// Output directory for images and summary.tsv
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Compare wall-clock and analytic cost of gated vs full execution
    Profile {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint to read
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Precompiled schedule (defaults to live routing)
        #[arg(long, value_name = "FILE")]
        schedule: Option<PathBuf>,
    },
    /// Export diagnostic tables from trained checkpoints
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Which table to produce
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        /// Checkpoint (loss-map, token-flops-map)
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Lower-capacity checkpoint (loss-gap)
        #[arg(long, value_name = "FILE")]
        small: Option<PathBuf>,
        /// Higher-capacity checkpoint (loss-gap)
        #[arg(long, value_name = "FILE")]
        large: Option<PathBuf>,
        /// Schedule file (activation-map)
        #[arg(long, value_name = "FILE")]
        schedule: Option<PathBuf>,
        /// Dataset image index (loss-map, token-flops-map)
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Timestep to analyze (loss-map; defaults to the last)
        #[arg(long)]
        t: Option<usize>,
        /// Number of timesteps on the loss-gap grid
        #[arg(long, default_value_t = 20)]
        points: usize,
        /// Output directory for the table
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Dataset { common, out } => {
            commands::dataset(&common.config()?, common.seed, &out)
        }
        Cmd::Train { common, out } => commands::train(&common.config()?, common.seed, &out),
        Cmd::Compile {
            common,
            checkpoint,
            out,
        } => commands::compile(&common.config()?, &checkpoint, &out),
        Cmd::Sample {
            common,
            checkpoint,
            schedule,
            live,
            full_width,
            out,
        } => {
            let width = match (schedule, live, full_width) {
                (Some(path), _, _) => WidthChoice::Schedule(path),
                (None, true, _) => WidthChoice::Live,
                (None, _, true) => WidthChoice::Static,
                (None, false, false) => anyhow::bail!(
                    "choose a width source: --schedule <file>, --live, or --static"
                ),
            };
            commands::sample(&common.config()?, &checkpoint, width, common.seed, &out)
        }
        Cmd::Profile {
            common,
            checkpoint,
            schedule,
        } => commands::profile(
            &common.config()?,
            &checkpoint,
            schedule.as_deref(),
            common.seed,
        ),
        Cmd::Analyze {
            common,
            mode,
            checkpoint,
            small,
            large,
            schedule,
            index,
            t,
            points,
            out,
        } => {
            let inputs = AnalyzeInputs {
                mode,
                checkpoint,
                small,
                large,
                schedule,
                index,
                t,
                points,
            };
            commands::analyze(&common.config()?, &inputs, common.seed, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
