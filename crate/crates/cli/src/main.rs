//! `slotlpr`: data generation, training, evaluation and verification for
//! slot-query license plate recognition.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slotlpr_core::{Mode, Profile};

#[derive(Parser, Debug)]
#[command(
    name = "slotlpr",
    version,
    about = "Slot-query license plate recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every command accepts.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for initialisation, shuffling or generation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run configuration JSON; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output path (file or directory, depending on the command).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

/// Training overrides shared by pretrain, adapt and ablate.
#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    /// Training dataset directory; generated in memory when absent.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Held-out dataset directory; generated in memory when absent.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate for every trainable group.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Size of the generated training set when no directory is given.
    #[arg(long)]
    pub train_count: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic plate dataset to a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: usize,
        #[arg(long, value_parser = parse_profile)]
        profile: Profile,
    },
    /// Train the backbone on clean plates.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Adapt a pretrained backbone in one ablation mode.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Mode,
    },
    /// Accuracy, CER and latency of a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory; the checkpoint's eval split is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Skip the latency measurement.
        #[arg(long)]
        no_latency: bool,
    },
    /// Read one plate image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Adapt in modes A to D over several seeds and compare.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        base: PathBuf,
        /// Number of seeds, counted up from --seed (default 0).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Write per-slot attention maps for one image.
    ExportAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Nearest-neighbour enlargement of each map.
        #[arg(long, default_value_t = 8)]
        upscale: usize,
    },
    /// Finite-difference check of every gradient rule and the micro model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Sabotage one named check (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    Profile::parse(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: slotlpr_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                println!(
                    "{}",
                    serde_json::json!({ "error": "usage", "kind": e.kind().to_string() })
                );
            }
            // exit status 2 for usage errors, 0 for --help and --version
            e.exit()
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let result = match cli.command {
        Command::GenData {
            common,
            count,
            profile,
        } => commands::gen_data(&common, count, profile),
        Command::Pretrain { common, train } => commands::pretrain(&common, &train),
        Command::Adapt {
            common,
            train,
            base,
            mode,
        } => commands::adapt(&common, &train, &base, mode),
        Command::Eval {
            common,
            ckpt,
            data,
            no_latency,
        } => commands::eval(&common, &ckpt, data.as_deref(), no_latency),
        Command::Infer {
            common,
            ckpt,
            image,
        } => commands::infer(&common, &ckpt, &image),
        Command::Ablate {
            common,
            train,
            base,
            seeds,
        } => commands::ablate(&common, &train, &base, seeds),
        Command::ExportAttn {
            common,
            ckpt,
            image,
            upscale,
        } => commands::export_attn(&common, &ckpt, &image, upscale),
        Command::Gradcheck { common, corrupt } => commands::gradcheck(&common, corrupt.as_deref()),
    };
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            if outcome.success {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            println!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
