mod commands;
mod output;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oltr::tensor::Precision;

#[derive(Parser)]
#[command(name = "oltr", version, about = "Open long-tailed recognition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides training.precision.
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
}

impl Common {
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: oltr::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Write the train, test and exploration-pool datasets.
    GenData(Common),
    /// Train a model; writes the epoch log and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from this checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Open-set evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Staged active exploration starting from a checkpoint.
    Explore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every operation and the full objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random instances per case.
        #[arg(long, default_value_t = oltr::gradsuite::DEFAULT_INSTANCES_PER_CASE)]
        instances: usize,
    },
    /// Merge CSV files into one summary table.
    Report {
        #[command(flatten)]
        common: Common,
        /// CSV files, or directories searched for CSV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Train {
            common,
            data,
            checkpoint,
        } => commands::train(&common, data.as_deref(), checkpoint.as_deref()),
        Command::Eval {
            common,
            data,
            checkpoint,
        } => commands::eval(&common, data.as_deref(), &checkpoint),
        Command::Explore {
            common,
            data,
            checkpoint,
        } => commands::explore(&common, data.as_deref(), &checkpoint),
        Command::Gradcheck { common, instances } => commands::gradcheck(&common, instances),
        Command::Report { common, inputs } => report::run(&common.out_dir(), &inputs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<oltr::Error>().is_some_and(|e| e.is_config());
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
