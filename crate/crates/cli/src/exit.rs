use std::fmt;
use std::process::ExitCode;

use dat_core::pipeline::PipelineError;

/// A command failure tagged with the exit status it maps to: 2 for usage
/// and configuration problems, 1 for everything that went wrong at run time.
#[derive(Debug)]
pub struct Failure {
    usage: bool,
    error: anyhow::Error,
}

pub type CmdResult<T = ()> = Result<T, Failure>;

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            usage: true,
            error: error.into(),
        }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            usage: false,
            error: error.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(if self.usage { 2 } else { 1 })
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::usage(e),
            other => Failure::runtime(other),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::runtime(e)
    }
}

/// Shorthands for tagging foreign errors.
pub trait Tag<T> {
    fn usage_err(self) -> CmdResult<T>;
    fn runtime_err(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn usage_err(self) -> CmdResult<T> {
        self.map_err(Failure::usage)
    }

    fn runtime_err(self) -> CmdResult<T> {
        self.map_err(Failure::runtime)
    }
}
