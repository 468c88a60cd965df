//! The `layerfuse` command line.
//!
//! [`run`] is the whole program: it parses arguments, layers them over an
//! optional JSON config file, validates every parameter before opening any
//! input, and reports failures as one JSON line on stderr.

mod cmd;
pub mod config;
mod error;
mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

use config::{EvalArgs, GenFixtureArgs, MergeArgs, MixArgs, SimilarityArgs, ValidateArgs};

pub const THREADS_ENV: &str = "LAYERFUSE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "layerfuse", version, about = "Layer-wise checkpoint merging and response evaluation")]
struct Cli {
    /// Worker threads for merge and similarity (falls back to LAYERFUSE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON config file with one section per subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Add a generation timestamp to reports (breaks byte-reproducibility).
    #[arg(long, global = true)]
    stamp: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a deterministic synthetic checkpoint, or a noisy copy of one.
    GenFixture(GenFixtureArgs),
    /// Merge two checkpoints layer by layer (winner-takes-all or task arithmetic).
    Merge(MergeArgs),
    /// Per-layer cosine similarity between two checkpoints.
    Similarity(SimilarityArgs),
    /// Score model responses against ground truth.
    Eval(EvalArgs),
    /// Classify responses as valid or by invalid-output category.
    Validate(ValidateArgs),
    /// Mix rehearsal pools into a task manifest.
    Mix(MixArgs),
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Ctx {
    pub stamp: bool,
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let message = e.kind().to_string();
            let detail = e.render().to_string();
            let first = detail
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or(&message)
                .trim_start_matches("error: ")
                .to_string();
            return report_error(&CliError::Usage(first));
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &CliError) -> i32 {
    let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    let mut stderr = std::io::stderr().lock();
    let _ = writeln!(stderr, "{line}");
    e.exit_code()
}

fn resolve_threads(flag: Option<usize>, file: Option<usize>) -> Result<Option<usize>, CliError> {
    let threads = match flag.or(file) {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(v.trim().parse::<usize>().map_err(|_| {
                CliError::invalid(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))
            })?),
            _ => None,
        },
    };
    if threads == Some(0) {
        return Err(CliError::invalid("threads must be at least 1"));
    }
    Ok(threads)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let threads = resolve_threads(cli.threads, file.threads)?;
    let ctx = Ctx { stamp: cli.stamp };

    // Validation happens inside `prepare`, before any input is opened.
    let job: Box<dyn FnOnce() -> Result<(), CliError> + Send> = match cli.command {
        Command::GenFixture(a) => {
            let job = cmd::fixture::prepare(a.over(file.gen_fixture))?;
            Box::new(move || cmd::fixture::execute(job, ctx))
        }
        Command::Merge(a) => {
            let job = cmd::merge::prepare(a.over(file.merge))?;
            Box::new(move || cmd::merge::execute(job, ctx))
        }
        Command::Similarity(a) => {
            let job = cmd::similarity::prepare(a.over(file.similarity))?;
            Box::new(move || cmd::similarity::execute(job, ctx))
        }
        Command::Eval(a) => {
            let job = cmd::eval::prepare(a.over(file.eval))?;
            Box::new(move || cmd::eval::execute(job, ctx))
        }
        Command::Validate(a) => {
            let job = cmd::validate::prepare(a.over(file.validate))?;
            Box::new(move || cmd::validate::execute(job, ctx))
        }
        Command::Mix(a) => {
            let job = cmd::mix::prepare(a.over(file.mix))?;
            Box::new(move || cmd::mix::execute(job, ctx))
        }
    };

    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::invalid(format!("cannot start {n} threads: {e}")))?
            .install(job),
        None => job(),
    }
}
