use thiserror::Error;

use crate::model::{ThetaParams, Violation};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parameter validation failed: {}", format_violations(.0))]
    InvalidParams(Vec<Violation>),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("regime {regime} is not stationary (spectral radius {radius:.6} >= 1)")]
    NotStationary { regime: usize, radius: f64 },

    #[error("numerical failure at t={t}: {msg}")]
    NumericalFailure { t: usize, msg: String },

    #[error("singular moment matrix: {0}")]
    SingularMoment(String),

    #[error("rank deficient data: rank {rank} < r = {r}")]
    RankDeficient { rank: usize, r: usize },

    #[error("permutation search limited to M <= 8 (got M = {0})")]
    TooManyRegimes(usize),

    #[error("not a permutation of 0..{0}")]
    NotAPermutation(usize),

    #[error("rejection sampling exhausted after {attempts} attempts: {what}")]
    SamplingExhausted { attempts: usize, what: String },

    #[error("bootstrap ensemble failed: {failed} of {total} replicates failed")]
    EnsembleFailure { failed: usize, total: usize },

    #[error("EM failed at iteration {iteration}: {source}")]
    Fit {
        iteration: usize,
        #[source]
        source: Box<Error>,
        /// Best parameters reached before the failure, if any.
        best: Option<Box<ThetaParams>>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that originate in floating-point computation rather
    /// than in malformed input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotStationary { .. }
            | Error::NumericalFailure { .. }
            | Error::SingularMoment(_)
            | Error::RankDeficient { .. }
            | Error::SamplingExhausted { .. }
            | Error::EnsembleFailure { .. } => true,
            Error::Fit { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
