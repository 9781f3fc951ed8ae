//! Error values carrying the process exit code.

use std::fmt;

use anchorloop_core::orchestrator::{OrchestratorError, PluginError};

/// Exit codes are a stable contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code {
    Validation = 1,
    Io = 2,
    Auth = 3,
}

pub struct Failure {
    pub code: Code,
    pub error: anyhow::Error,
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {:#}", self.code, self.error)
    }
}

impl Failure {
    pub fn from_io(e: std::io::Error) -> Self {
        Failure { code: Code::Io, error: e.into() }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

/// Tags any error with an exit code.
pub trait Classify<T> {
    fn or_exit(self, code: Code) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_exit(self, code: Code) -> CliResult<T> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

pub fn fail<T>(code: Code, message: impl fmt::Display) -> CliResult<T> {
    Err(Failure {
        code,
        error: anyhow::anyhow!("{message}"),
    })
}

pub fn loop_failure(e: OrchestratorError) -> Failure {
    let code = match &e {
        OrchestratorError::Fatal(PluginError::Auth(_)) => Code::Auth,
        OrchestratorError::Fatal(PluginError::Transport(_)) => Code::Auth,
        OrchestratorError::LoopAborted { last_error, .. } if last_error.starts_with("transport failure") => {
            Code::Auth
        }
        OrchestratorError::Observer { .. } => Code::Io,
        _ => Code::Validation,
    };
    Failure { code, error: e.into() }
}
