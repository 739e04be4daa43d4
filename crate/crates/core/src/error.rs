use thiserror::Error;

use crate::data_model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed input or a schema violation in a user-supplied document.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid aggregate data: {}", .0.join("; "))]
    InvalidAgd(Vec<String>),

    #[error("invalid trial: {}", format_violations(.0))]
    InvalidTrial(Vec<Violation>),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("labels contain a single class; no finite maximum-likelihood estimate")]
    OneClassLabels,

    #[error("too few observations: n = {n} for {params} parameters")]
    TooFewObservations { n: usize, params: usize },

    #[error("complete or quasi-complete separation: coefficient {index} reached {value:.3} on the standardized scale")]
    Separation { index: usize, value: f64 },

    #[error("covariate '{0}' is constant")]
    ConstantCovariate(String),

    #[error("infeasible moment targets: {0}")]
    Infeasible(String),

    #[error("degenerate cell: {0}")]
    DegenerateCell(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("failed to converge: {0}")]
    NonConvergence(String),

    #[error("effect scale mismatch: {left} vs {right}")]
    ScaleMismatch { left: String, right: String },

    #[error("impossible correlation: {0}")]
    ImpossibleCorrelation(String),

    /// Violation of the arbitration protocol (hash mismatch, wrong recipient, misuse).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("simulation study failed: {0}")]
    StudyFailed(String),
}

impl Error {
    /// True when the error stems from malformed input rather than from the analysis.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::InvalidAgd(_)
                | Error::InvalidTrial(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::DimensionMismatch { .. }
        )
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
