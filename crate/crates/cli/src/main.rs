//! `anchorloop` command-line tool.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O failure, 3
//! authentication or network failure.

mod commands;
mod config;
mod failure;

use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anchorloop_core::playbook::{Severity, StrategyState};
use clap::{Parser, Subcommand, ValueEnum};

use config::{RunConfig, RunOverrides};
use failure::{CliResult, Code};

#[derive(Parser)]
#[command(name = "anchorloop", version, about = "Build and calibrate simulators with a blueprint-anchored loop")]
struct Cli {
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check or review a blueprint.
    Blueprint {
        #[command(subcommand)]
        action: BlueprintAction,
    },
    /// Run the construction loop.
    Run {
        /// JSON file with run settings; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: RunOverrides,
    },
    /// Inspect a playbook.
    Playbook {
        #[command(subcommand)]
        action: PlaybookAction,
    },
    /// Per-iteration diagnostics from a history file, as CSV.
    Diagnose {
        kind: DiagnoseKind,
        #[arg(long)]
        history: PathBuf,
        /// Similarity threshold for recurrent errors.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Reference simulator utilities.
    Refsim {
        #[command(subcommand)]
        action: RefsimAction,
    },
}

#[derive(Subcommand)]
enum BlueprintAction {
    Validate {
        #[arg(long)]
        blueprint: PathBuf,
    },
    /// Walk through the sections, applying edits typed on standard input.
    Review {
        #[arg(long)]
        blueprint: PathBuf,
        /// Output file; defaults to `<stem>.v<version>.json` beside the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PlaybookAction {
    Show {
        #[arg(long)]
        playbook: PathBuf,
        #[arg(long, value_parser = parse_state)]
        state: Option<StrategyState>,
        #[arg(long, value_parser = parse_severity)]
        severity: Option<Severity>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DiagnoseKind {
    Cre,
    Irr,
}

#[derive(Subcommand)]
enum RefsimAction {
    /// Write the synthetic world, its observations and the bundled blueprint.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_state(s: &str) -> Result<StrategyState, String> {
    s.to_ascii_uppercase().parse().map_err(|_| format!("unknown state `{s}`"))
}

fn parse_severity(s: &str) -> Result<Severity, String> {
    s.to_ascii_uppercase().parse().map_err(|_| format!("unknown severity `{s}`"))
}

fn dispatch(command: Command) -> CliResult<String> {
    match command {
        Command::Blueprint { action } => match action {
            BlueprintAction::Validate { blueprint } => commands::blueprint_validate(&blueprint),
            BlueprintAction::Review { blueprint, out } => {
                let stdin = io::stdin();
                let mut stdout = io::stdout();
                commands::blueprint_review(&blueprint, out.as_deref(), stdin.lock(), &mut stdout)
            }
        },
        Command::Run { config, flags } => {
            let cfg = RunConfig::resolve(flags, config.as_deref())?;
            commands::run(&cfg)
        }
        Command::Playbook { action } => match action {
            PlaybookAction::Show {
                playbook,
                state,
                severity,
            } => commands::playbook_show(&playbook, state, severity),
        },
        Command::Diagnose {
            kind,
            history,
            threshold,
        } => match kind {
            DiagnoseKind::Cre => commands::diagnose_cre(&history, threshold),
            DiagnoseKind::Irr => commands::diagnose_irr(&history),
        },
        Command::Refsim { action } => match action {
            RefsimAction::Generate { seed, out } => commands::refsim_generate(seed, &out),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // usage errors are validation failures (1), not clap's default 2
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Code::Validation as u8) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(text) => {
            let mut stdout = io::stdout().lock();
            // a closed pipe is not worth a non-zero exit
            let _ = stdout.write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code as u8)
        }
    }
}
