mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Two-stage locomotion pipeline: train a reduced-order teacher, record its
/// gait, distill it into a biped student, and compare gaits.
///
/// Log verbosity is read from ROMGAIT_LOG (e.g. `ROMGAIT_LOG=debug`; default `info`).
#[derive(Debug, Parser)]
#[command(name = "romgait", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML config file (tables: teacher, record, student, evaluate)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set student.sac.batch_size=128` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Random seed for this stage
    #[arg(long)]
    pub seed: Option<u64>,
    /// Step budget: training env steps, recorded frames, or rollout length
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the reduced-order teacher with PPO
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Forward speed to track, m/s
        #[arg(long)]
        target_speed: Option<f64>,
    },
    /// Roll out a teacher checkpoint and save its gait features as a reference dataset
    Record {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint (teacher.ckpt)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the frames as CSV
        #[arg(long)]
        export_csv: bool,
    },
    /// Train the biped student with SAC and the gait discriminator
    TrainStudent {
        #[command(flatten)]
        common: Common,
        /// Reference dataset produced by `record`
        #[arg(long)]
        reference: PathBuf,
        /// Weight of the environment reward; 1 disables imitation
        #[arg(long)]
        eta: Option<f64>,
        /// Forward speed to track, m/s (default: the reference's speed)
        #[arg(long)]
        target_speed: Option<f64>,
    },
    /// Compare student and baseline gaits against the reference
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reference: PathBuf,
        /// Student checkpoint (η < 1)
        #[arg(long)]
        student: Option<PathBuf>,
        /// Baseline checkpoint (η = 1)
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Evaluation episodes per policy
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Print configuration
    Config {
        #[command(flatten)]
        common: Common,
        /// Print the built-in defaults instead of the resolved configuration
        #[arg(long)]
        show_defaults: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROMGAIT_LOG", "info")).format_timestamp_secs().init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainTeacher { common, target_speed } => commands::train_teacher(&common, target_speed),
        Command::Record { common, checkpoint, export_csv } => commands::record(&common, &checkpoint, export_csv),
        Command::TrainStudent { common, reference, eta, target_speed } => commands::train_student(&common, &reference, eta, target_speed),
        Command::Evaluate { common, reference, student, baseline, episodes } => {
            commands::evaluate(&common, &reference, student.as_deref(), baseline.as_deref(), episodes)
        }
        Command::Config { common, show_defaults } => commands::show_config(&common, show_defaults),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
