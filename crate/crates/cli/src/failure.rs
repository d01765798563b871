//! Error classes and the process exit codes they map to.

use std::fmt::Display;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    /// Bad flags, config or input files; nothing has been written.
    #[error("{0:#}")]
    Invalid(anyhow::Error),
    /// Work began on valid inputs and then failed.
    #[error("{0:#}")]
    Runtime(anyhow::Error),
    /// The gradient check ran and some entries exceeded the tolerance.
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::GradCheck(_) => 3,
        }
    }

    pub fn invalid(msg: impl Display) -> Self {
        Failure::Invalid(anyhow::anyhow!("{msg}"))
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Tags an error with its class and a short description of the step.
pub trait Classify<T> {
    fn invalid(self, what: &str) -> CliResult<T>;
    fn runtime(self, what: &str) -> CliResult<T>;
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn invalid(self, what: &str) -> CliResult<T> {
        self.map_err(|e| Failure::Invalid(e.into().context(what.to_string())))
    }

    fn runtime(self, what: &str) -> CliResult<T> {
        self.map_err(|e| Failure::Runtime(e.into().context(what.to_string())))
    }
}
