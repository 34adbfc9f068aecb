use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KdemError>;

#[derive(Debug, Error)]
pub enum KdemError {
    #[error("missing input files: {}", join_paths(.0))]
    MissingFiles(Vec<PathBuf>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unknown food groups referenced by purchases: {}", .0.join(", "))]
    UnknownFoodGroups(Vec<String>),

    #[error("members without a household: {}", .0.join(", "))]
    OrphanMembers(Vec<String>),

    #[error("{path}:{line}: negative quantity {value}")]
    NegativeQuantity { path: PathBuf, line: u64, value: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("week {week} outside panel range 0..={weeks}")]
    WeekOutOfRange { week: i64, weeks: usize },

    #[error("no body weight bracket for sex {sex}, age {age:.3}")]
    MissingBodyWeight { sex: String, age: f64 },

    #[error("invalid hypothesis: {0}")]
    Hypothesis(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(
        "optimizer did not converge after {iterations} iterations \
         (gradient inf-norm {grad_norm:.3e}, restricted log-likelihood {loglik})"
    )]
    NotConverged {
        iterations: usize,
        grad_norm: f64,
        loglik: f64,
        best_variances: Vec<f64>,
    },
}

impl KdemError {
    /// Input problems that a user can fix by editing files or flags.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            KdemError::MissingFiles(_)
                | KdemError::Io { .. }
                | KdemError::Csv { .. }
                | KdemError::Json(_)
                | KdemError::UnknownFoodGroups(_)
                | KdemError::OrphanMembers(_)
                | KdemError::NegativeQuantity { .. }
                | KdemError::Invalid(_)
                | KdemError::WeekOutOfRange { .. }
                | KdemError::MissingBodyWeight { .. }
                | KdemError::Hypothesis(_)
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        KdemError::Invalid(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        KdemError::Numerical(msg.into())
    }
}

fn join_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}
