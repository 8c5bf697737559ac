use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("birefringence axis must lie in the equatorial plane (s3 = {0})")]
    NonEquatorialAxis(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("correlator {0} is undefined (no counts in its basis pair)")]
    UndefinedCorrelator(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no feasible device model (maximum constraint violation {violation:.3e})")]
    Infeasible { violation: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed count matrix CSV at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
