use thiserror::Error;

use crate::concept::ConceptError;
use crate::evaluator::EvalError;
use crate::experiment::ExperimentError;
use crate::gaussian::GaussianError;
use crate::probe::ProbeError;
use crate::rankers::RankError;
use crate::store::StoreError;
use crate::voting::VoteError;

/// Any error raised by the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Vote(#[from] VoteError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

impl Error {
    /// Stable variant name, used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Store(e) => e.kind(),
            Error::Concept(e) => e.kind(),
            Error::Probe(e) => e.kind(),
            Error::Gaussian(e) => e.kind(),
            Error::Rank(e) => e.kind(),
            Error::Vote(e) => e.kind(),
            Error::Eval(e) => e.kind(),
            Error::Experiment(e) => e.kind(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
