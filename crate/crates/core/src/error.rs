use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A user-supplied value violates a documented constraint.
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A state or costate became non-finite during integration.
    #[error("{kind} integration aborted at step {step} (t = {t}){}", sample_suffix(*.sample))]
    IntegrationAbort {
        kind: &'static str,
        step: usize,
        t: f64,
        sample: Option<usize>,
    },

    #[error("config {path}: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn sample_suffix(sample: Option<usize>) -> String {
    match sample {
        Some(i) => format!(" for sample {i}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Attaches the sample index to an integration abort; other errors pass through.
    pub(crate) fn for_sample(self, index: usize) -> Self {
        match self {
            Error::IntegrationAbort { kind, step, t, .. } => Error::IntegrationAbort {
                kind,
                step,
                t,
                sample: Some(index),
            },
            other => other,
        }
    }
}
