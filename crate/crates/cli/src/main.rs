mod commands;
mod config;
mod http;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use skillsynth_core::pool::LabelFilter;
use skillsynth_core::profile::Profile;
use skillsynth_core::synthesis::LeakPolicy;

const EXIT_CODES: &str = "Exit status:
  0  success
  2  configuration error (bad or missing config, invalid flag values)
  3  input error (missing or malformed files, missing skill for a task)
  4  provider error (embedding or generation call failed)
  5  leak policy rejected a synthesized skill

Provider keys are read from the environment variable named by each
provider's `key_env`; they are never accepted on the command line or in
the config file.";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0:#}")]
    Config(anyhow::Error),
    #[error("input error: {0:#}")]
    Input(anyhow::Error),
    #[error("provider error: {0:#}")]
    Provider(anyhow::Error),
    #[error("leak policy rejected a skill: {0:#}")]
    Leak(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Provider(_) => 4,
            CliError::Leak(_) => 5,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "skillsynth", version, about = "Synthesize task-specific skills from retrieved trajectories", after_help = EXIT_CODES)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override config file values.
#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file (default: ./skillsynth.toml if present)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Trajectories retrieved per task
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Label filter: all, success_only, failure_only
    #[arg(long, global = true)]
    pub filter: Option<LabelFilter>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Solver samples per task
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// reject_on_leak or warn_on_leak
    #[arg(long, global = true, value_parser = parse_policy)]
    pub leak_policy: Option<LeakPolicy>,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

fn parse_policy(s: &str) -> Result<LeakPolicy, String> {
    match s {
        "reject_on_leak" | "reject" => Ok(LeakPolicy::RejectOnLeak),
        "warn_on_leak" | "warn" => Ok(LeakPolicy::WarnOnLeak),
        other => Err(format!("unknown leak policy `{other}`")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a trajectory pool and print label counts
    Ingest {
        #[arg(long)]
        pool: PathBuf,
        /// Write the normalized pool here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed a pool and write a vector index
    Index {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Instruction summary cache (JSONL)
        #[arg(long)]
        summaries: Option<PathBuf>,
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Retrieve trajectories for one task and print them as JSON
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        /// Tasks file (JSONL task contexts)
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        task_id: String,
        #[arg(long)]
        summaries: Option<PathBuf>,
    },
    /// Write one <task_id>.skill.md per test task plus manifest.json
    Synthesize {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summaries: Option<PathBuf>,
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Solve test tasks with their skills and write outcomes (JSONL)
    Solve {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        skills: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Score synthetic-family outcomes and write verdicts (JSONL)
    Verify {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate verdicts into metrics JSON
    Evaluate {
        #[arg(long)]
        verdicts: Option<PathBuf>,
        /// Solver outcomes (JSONL) supplying step counts
        #[arg(long)]
        outputs: Option<PathBuf>,
        /// Externally executed agentic episodes (JSONL)
        #[arg(long)]
        transcripts: Option<PathBuf>,
        #[arg(long)]
        profile: Profile,
        #[arg(long, default_value = "full_pipeline")]
        arm: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Summarize a cost ledger as CSV
    Cost {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        n_test: usize,
        #[arg(long, default_value = "test_time_synthesis")]
        method: String,
        /// Report input plus decoded tokens instead of decoded only
        #[arg(long)]
        total_tokens: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a seeded synthetic benchmark (pool.jsonl, tasks.jsonl)
    Synthetic {
        #[arg(long, default_value_t = 40)]
        tasks: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all five stages and write every artifact to one directory
    Run {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summaries: Option<PathBuf>,
    },
    /// Compare ablation arms on a verifiable (synthetic) benchmark
    Ablate {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated arms, e.g. full,raw,no_retrieval,random,top_k_5,source_all
        #[arg(long, value_delimiter = ',', default_value = "full_pipeline,raw_trajectory_prompting,no_retrieval,random_retrieval")]
        arms: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .init();
    match commands::dispatch(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("skillsynth: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
