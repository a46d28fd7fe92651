//! Command-line front end for the docsync pipeline.
//!
//! `run` parses arguments, loads configuration and dispatches to the
//! subcommands in [`commands`]. Exit codes: 0 success, 1 usage error,
//! 2 data error, 3 backend error.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{Draft, EvalOptions, RepairOptions};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "docsync",
    version,
    about = "Detect and repair stale docstrings"
)]
pub struct Cli {
    /// Config file (defaults to $DOCSYNC_CONFIG, then ./docsync.toml).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log more; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus and report record counts per language.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        /// Write the validated (and sampled) records here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        /// Draw this many records using the configured seed.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Turn corpus records into drift cases with stale docstrings.
    Simulate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Chunk and embed corpus docstrings into a vector store.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        max_chars: Option<usize>,
    },
    /// Print the signature summary of a source file.
    Ast {
        file: PathBuf,
        #[arg(long)]
        language: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Classify the change between two versions of a source file.
    Classify { old: PathBuf, new: PathBuf },
    /// Run the update loop over drift cases and write run traces.
    Repair {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_retries: Option<usize>,
        /// Answer every model call from this fixture instead of the network.
        #[arg(long)]
        mock: Option<PathBuf>,
        /// Vector store for retrieved context.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Record failed cases and continue instead of aborting.
        #[arg(long)]
        keep_going: bool,
        /// Generate even when the code change is irrelevant.
        #[arg(long)]
        bypass_gate: bool,
    },
    /// Normalize a string, or the generated drafts of a trace file.
    Normalize {
        #[arg(long, conflicts_with_all = ["input", "out"])]
        text: Option<String>,
        #[arg(long = "in", requires = "out")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_tokens: Option<usize>,
    },
    /// Score run traces against reference docstrings.
    Eval {
        #[arg(long)]
        traces: PathBuf,
        /// Drift cases holding the reference docstrings.
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        system: Option<String>,
        #[arg(long, value_enum, default_value_t = Draft::Final)]
        draft: Draft,
        /// Ask the judge model for a 1-5 score per example.
        #[arg(long)]
        judge: bool,
        /// Answer judge calls from this fixture; implies --judge.
        #[arg(long)]
        judge_mock: Option<PathBuf>,
        /// Also score the stale docstrings, the other draft and any baselines,
        /// and print comparison tables.
        #[arg(long)]
        compare: bool,
        /// Extra system as NAME=TRACES, scored on its final drafts.
        #[arg(long, value_parser = parse_baseline)]
        baseline: Vec<(String, PathBuf)>,
        /// Also write the comparison tables to this file.
        #[arg(long, requires = "compare")]
        report: Option<PathBuf>,
    },
    /// Render tables from eval output files.
    Report {
        #[arg(required = true)]
        evals: Vec<PathBuf>,
        /// Render an initial-vs-final table from exactly two files.
        #[arg(long)]
        refinement: bool,
    },
}

fn parse_baseline(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}

/// Executes a parsed command, returning its stdout text.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    let cfg = config::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Ingest {
            corpus,
            out,
            limit,
            sample,
        } => commands::ingest(&cfg, corpus, out.as_deref(), *limit, *sample),
        Command::Simulate {
            corpus,
            out,
            limit,
            sample,
        } => commands::simulate(&cfg, corpus, out, *limit, *sample),
        Command::Index {
            corpus,
            out,
            limit,
            max_chars,
        } => commands::index(&cfg, corpus, out, *limit, *max_chars),
        Command::Ast {
            file,
            language,
            json,
        } => commands::ast(&cfg, file, language.as_deref(), *json),
        Command::Classify { old, new } => commands::classify(old, new),
        Command::Repair {
            cases,
            out,
            max_retries,
            mock,
            store,
            keep_going,
            bypass_gate,
        } => commands::repair(
            &cfg,
            &RepairOptions {
                cases,
                out,
                max_retries: *max_retries,
                mock: mock.as_deref(),
                store: store.as_deref(),
                keep_going: *keep_going,
                bypass_gate: *bypass_gate,
            },
        ),
        Command::Normalize {
            text,
            input,
            out,
            max_tokens,
        } => match (text, input, out) {
            (Some(t), _, _) => Ok(commands::normalize_text(&cfg, t, *max_tokens)),
            (None, Some(i), Some(o)) => commands::normalize_traces(&cfg, i, o, *max_tokens),
            _ => Err(CliError::Usage(
                "normalize needs --text, or --in and --out".into(),
            )),
        },
        Command::Eval {
            traces,
            refs,
            out,
            system,
            draft,
            judge,
            judge_mock,
            compare,
            baseline,
            report,
        } => commands::eval(
            &cfg,
            &EvalOptions {
                traces,
                refs,
                out,
                system: system.as_deref(),
                draft: *draft,
                judge: *judge || judge_mock.is_some(),
                judge_mock: judge_mock.as_deref(),
                compare: *compare,
                baselines: baseline,
                report: report.as_deref(),
            },
        ),
        Command::Report { evals, refinement } => commands::report(evals, *refinement),
    }
}

/// Parses `args`, runs the command, prints its output and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .try_init();

    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
