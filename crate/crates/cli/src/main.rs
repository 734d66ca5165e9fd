use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use karma_cli::commands::{self, Preset, TrainArgs};
use karma_cli::{CliError, ExperimentConfig};
use karma_core::trainer::Variant;

#[derive(Parser)]
#[command(
    name = "karma",
    version,
    about = "Train and evaluate multi-task recommenders on synthetic search sessions"
)]
struct Cli {
    /// Experiment config (JSON). Omitted sections take their defaults.
    #[arg(long, global = true, env = "KARMA_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory, overriding the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Table1,
    Table3,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic catalog and sessions into <out>/data.
    GenData,
    /// Train one variant.
    Train {
        /// action-only, task1, task2, karma, karma-mm or generator:{mse,ddpm,edm,fm}
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        lambda_dec: Option<f64>,
        #[arg(long)]
        lambda_img: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        warmup_steps: Option<usize>,
        #[arg(long)]
        joint_steps: Option<usize>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// HR cutoffs, comma separated.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Run a multi-seed ablation preset.
    Ablation {
        #[arg(long, value_enum)]
        preset: PresetArg,
    },
    /// Dump attention maps and the sink profile of a checkpoint.
    DiagnoseAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of catalog items to run through the encoder.
        #[arg(long, default_value_t = 8)]
        items: usize,
        /// Also capture the user decoder on the first held-out history.
        #[arg(long)]
        decoder: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train {
            variant,
            lambda_dec,
            lambda_img,
            seed,
            warmup_steps,
            joint_steps,
            resume,
        } => commands::train(
            cfg,
            &TrainArgs {
                variant,
                lambda_dec,
                lambda_img,
                seed,
                warmup_steps,
                joint_steps,
                resume,
            },
        ),
        Command::Eval { checkpoint, k } => commands::eval(cfg, &checkpoint, k),
        Command::Ablation { preset } => {
            let p = match preset {
                PresetArg::Table1 => Preset::Table1,
                PresetArg::Table3 => Preset::Table3,
            };
            commands::ablation(&cfg, p).map(|_| ())
        }
        Command::DiagnoseAttention {
            checkpoint,
            items,
            decoder,
        } => commands::diagnose_attention(&cfg, &checkpoint, items, decoder),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
