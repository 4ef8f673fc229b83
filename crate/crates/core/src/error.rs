use thiserror::Error;

/// Errors raised by ingestion, estimation, inference and testing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("self-loop at row {row}")]
    SelfLoop { row: usize },
    #[error("time {time} outside (0, {tau}] at row {row}")]
    TimeOutOfRange { row: usize, time: f64, tau: f64 },
    #[error("node {node} outside [1, {n}] at row {row}")]
    NodeOutOfRange { row: usize, node: i64, n: usize },
    #[error("malformed row {row}: {msg}")]
    MalformedRow { row: usize, msg: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("intensity overflow: exponent {exponent:.3} exceeds 700")]
    IntensityOverflow { exponent: f64 },
    #[error("non-finite intensity bound for pair ({sender}, {receiver})")]
    NonFiniteIntensity { sender: usize, receiver: usize },
    #[error("gamma solve failed at t={t}")]
    GammaSolveFailed { t: f64 },
    #[error("degenerate S-matrix at t={t}")]
    DegenerateSMatrix { t: f64 },
    #[error("H_Q not invertible at t={t}")]
    HqNotInvertible { t: f64 },
    #[error("fit undefined at t={t}")]
    UndefinedFit { t: f64 },
    #[error("no testable coordinates")]
    NoTestableCoordinates,
    #[error("need ≥ 2 grid times")]
    NeedTwoGridTimes,
    #[error("zero successful replicates")]
    NoSuccessfulReplicates,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the user's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::IntensityOverflow { .. }
                | Error::NonFiniteIntensity { .. }
                | Error::GammaSolveFailed { .. }
                | Error::DegenerateSMatrix { .. }
                | Error::HqNotInvertible { .. }
                | Error::UndefinedFit { .. }
                | Error::NoSuccessfulReplicates
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
