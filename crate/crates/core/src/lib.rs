//! Markov-switching linear state-space models.
//!
//! Approximate maximum likelihood by EM with Kim filtering and smoothing,
//! regime-specific stationary covariance structure, and parametric
//! bootstrap inference.

pub mod bootstrap;
pub mod em;
pub mod error;
pub mod init;
pub mod kim;
pub mod linalg;
pub mod matching;
pub mod model;
pub mod mstep;
pub mod numerics;
pub mod simulate;
pub mod stationary;
pub mod study;

pub use error::{Error, Result};
pub use matching::match_regimes_by_classification;
pub use model::{
    permute_regimes, validate, ConstraintSet, EqualityConstraints, FixedCoefficients, ModelKind,
    ModelSpec, RegimeSequence, ThetaParams, Violation,
};
