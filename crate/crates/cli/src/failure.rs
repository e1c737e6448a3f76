use std::process::ExitCode;

use gas_core::error::Error;
use serde::Serialize;

/// A failed command: exit code plus the JSON payload printed to stderr.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub exit_code: u8,
    pub kind: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            exit_code: 1,
            kind: "usage",
            message: message.into(),
            details: Vec::new(),
        }
    }

    pub fn config(message: impl Into<String>, details: Vec<String>) -> Self {
        Self {
            exit_code: 1,
            kind: "config",
            message: message.into(),
            details,
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            exit_code: 2,
            kind: "runtime",
            message: message.into(),
            details: Vec::new(),
        }
    }

    pub fn report(self) -> ExitCode {
        let payload = serde_json::json!({ "error": &self });
        eprintln!("{payload}");
        ExitCode::from(self.exit_code)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Config(v) | Error::InvalidGenotype(v) => Failure::config(message, v),
            Error::InvalidArgument(_)
            | Error::Parse(_)
            | Error::Version { .. }
            | Error::Shape(_)
            | Error::MissingLatency(_) => Failure::config(message, Vec::new()),
            Error::BackendUnavailable(_)
            | Error::NonFinite { .. }
            | Error::InfeasibleBudget { .. }
            | Error::Undefined(_)
            | Error::Io(_)
            | Error::Json(_) => Failure::runtime(message),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;
