//! `gdl` — the laboratory's command line.
//!
//! Subcommands: `verify-posterior`, `gen-data`, `train`, `sample`, `eval`,
//! `mtp`, `ablate`. Configuration comes from JSON (`--config`), with flags
//! taking precedence over the file and the file over built-in defaults.
//!
//! Exit codes: 0 success, 1 property failure, 2 configuration error,
//! 3 training divergence. `GDL_THREADS` caps the worker pool.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::{resolve, Overrides};
use gdl_core::student_mdlm::{ExtractionMode, NoiseMode};
use gdl_core::GdlError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Gumbel,
    Gaussian,
    Uniform,
    None,
}

impl From<ModeArg> for NoiseMode {
    fn from(m: ModeArg) -> NoiseMode {
        match m {
            ModeArg::Gumbel => NoiseMode::Gumbel,
            ModeArg::Gaussian => NoiseMode::Gaussian,
            ModeArg::Uniform => NoiseMode::Uniform,
            ModeArg::None => NoiseMode::None,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExtractionArg {
    Parallel,
    Sequential,
}

impl From<ExtractionArg> for ExtractionMode {
    fn from(e: ExtractionArg) -> ExtractionMode {
        match e {
            ExtractionArg::Parallel => ExtractionMode::Parallel,
            ExtractionArg::Sequential => ExtractionMode::SequentialOffline,
        }
    }
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Args)]
struct Common {
    /// JSON config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Global seed; every random stream derives from it.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Function-evaluation budgets, comma separated (e.g. 1,2,4,8,16).
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    nfe: Option<Vec<usize>>,
    /// Conditioning noise mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// How training noise is obtained from the teacher.
    #[arg(long, value_enum)]
    extraction: Option<ExtractionArg>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            nfe: self.nfe.clone(),
            mode: self.mode.map(NoiseMode::from),
            extraction: self.extraction.map(ExtractionMode::from),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gdl",
    about = "Gumbel-distillation laboratory: posterior noise extraction, parallel students, and their property suite",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the posterior-extraction property suite and write its CSV report.
    VerifyPosterior {
        #[command(flatten)]
        common: Common,
        /// Trial count for the argmax and marginal properties (>= 10000).
        #[arg(long, value_name = "INT")]
        trials: Option<usize>,
        /// Corrupt the posterior formula on purpose; the suite must fail.
        #[arg(long)]
        inject_bug: bool,
    },
    /// Generate the maze corpus and teacher table (plus offline noise when
    /// --extraction sequential).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the student (and the neural teacher, if configured) on a
    /// generated corpus.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Draw samples from a trained student at each configured budget.
    Sample {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained student: success rate and exact-teacher NLL per
    /// budget.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Train both multi-token-prediction head arms on a neural backbone and
    /// report conditional acceptance rates.
    Mtp {
        #[command(flatten)]
        common: Common,
    },
    /// Train one student per ablation arm and compare success across
    /// budgets.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Run each arm in its own OS process.
        #[arg(long)]
        parallel_arms: bool,
    },
}

fn init_thread_pool() -> Result<(), String> {
    match std::env::var("GDL_THREADS") {
        Ok(raw) => {
            let n: usize = raw
                .trim()
                .parse()
                .map_err(|_| format!("GDL_THREADS must be a positive integer, got {raw:?}"))?;
            if n == 0 {
                return Err("GDL_THREADS must be >= 1".into());
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| format!("thread pool: {e}"))
        }
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(format!("GDL_THREADS: {e}")),
    }
}

fn run(cli: Cli) -> gdl_core::Result<()> {
    match cli.command {
        Cmd::VerifyPosterior {
            common,
            trials,
            inject_bug,
        } => {
            let resolved = resolve(common.config.as_deref(), &common.overrides())?;
            commands::cmd_verify_posterior(&resolved, trials, inject_bug)
        }
        Cmd::GenData { common } => {
            let resolved = resolve(common.config.as_deref(), &common.overrides())?;
            commands::cmd_gen_data(&resolved)
        }
        Cmd::Train { common } => {
            let resolved = resolve(common.config.as_deref(), &common.overrides())?;
            commands::cmd_train(&resolved)
        }
        Cmd::Sample { common } => {
            let resolved = resolve(common.config.as_deref(), &common.overrides())?;
            commands::cmd_sample(&resolved)
        }
        Cmd::Eval { common } => {
            let resolved = resolve(common.config.as_deref(), &common.overrides())?;
            commands::cmd_eval(&resolved)
        }
        Cmd::Mtp { common } => {
            let resolved = resolve(common.config.as_deref(), &common.overrides())?;
            commands::cmd_mtp(&resolved)
        }
        Cmd::Ablate {
            common,
            parallel_arms,
        } => {
            let resolved = resolve(common.config.as_deref(), &common.overrides())?;
            commands::cmd_ablate(&resolved, parallel_arms)
        }
    }
}

fn error_code(e: &GdlError) -> u8 {
    match e {
        GdlError::Config(_)
        | GdlError::EmptyCorpus
        | GdlError::NoValidPath
        | GdlError::InvalidProbability(_)
        | GdlError::CheckpointFormat(_)
        | GdlError::Serde(_) => 2,
        GdlError::Divergence(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    if let Err(msg) = init_thread_pool() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_code(&e))
        }
    }
}
