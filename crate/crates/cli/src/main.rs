use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tpkd_cli::commands::{self, Role};
use tpkd_cli::config::ExperimentConfig;
use tpkd_cli::CliResult;

/// Topology-guided knowledge distillation experiment driver.
#[derive(Parser)]
#[command(name = "tpkd", version, about)]
struct Cli {
    /// Experiment config (JSON); defaults to the built-in desk-scale config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override single config keys with dotted paths, e.g.
    /// --set distill.beta=5 --set seeds=[1,2,3]
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,

    /// Re-run phases even when the manifest says they are up to date.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val/test splits.
    GenData,
    /// Extract persistence images for every split.
    ExtractPi,
    /// Train one role (teachers once, student roles per seed).
    Train {
        #[arg(long, value_enum)]
        role: Role,
    },
    /// Evaluate a checkpoint on the clean or corrupted test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corruption severity: 0 (clean) through 3.
        #[arg(long, default_value_t = 0)]
        corruption: usize,
        #[arg(long, default_value_t = 9999)]
        corrupt_seed: u64,
        /// Report path; defaults to <out_dir>/eval/<ckpt>-c<level>.json
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure batch-1 inference latency of the three models.
    Bench {
        /// Student checkpoint; defaults to student-tpkd at the first seed.
        #[arg(long)]
        student_ckpt: Option<PathBuf>,
    },
    /// Emit patch-Pearson histograms and layer-pair CKA matrices.
    Analyze {
        #[arg(long)]
        student_ckpt: Option<PathBuf>,
    },
    /// Print the resolved configuration and exit.
    ShowConfig,
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData => commands::cmd_gen_data(&cfg, cli.force),
        Command::ExtractPi => commands::cmd_extract_pi(&cfg, cli.force),
        Command::Train { role } => commands::cmd_train(&cfg, role, cli.force),
        Command::Eval {
            ckpt,
            corruption,
            corrupt_seed,
            out,
        } => commands::cmd_eval(&cfg, &ckpt, corruption, corrupt_seed, out.as_deref()).map(|_| ()),
        Command::Bench { student_ckpt } => {
            commands::cmd_bench(&cfg, student_ckpt.as_deref()).map(|_| ())
        }
        Command::Analyze { student_ckpt } => commands::cmd_analyze(&cfg, student_ckpt.as_deref()),
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
