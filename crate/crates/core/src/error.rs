use thiserror::Error;

use crate::markov::ChainState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid protocol parameters: {0}")]
    InvalidParams(String),

    /// Error probabilities must be nonincreasing in the number of transmissions.
    #[error("error table is not monotone: eps[{w}] = {upper} < eps[{next}] = {lower}", next = w + 1)]
    NonMonotoneTable { w: u32, upper: f64, lower: f64 },

    #[error("error table does not cover transmission count {0}")]
    MissingEntry(u32),

    /// The chain has no unique stationary distribution, or some error
    /// probability sits exactly on 0 or 1.
    #[error("degenerate Markov chain, offending states: {}", fmt_states(.states))]
    DegenerateChain { states: Vec<ChainState> },

    #[error("linear solve failed: {0}")]
    Numerical(String),

    #[error("invalid simulation config: {0}")]
    Config(String),

    #[error("cache I/O: {0}")]
    Cache(String),
}

fn fmt_states(states: &[ChainState]) -> String {
    states
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, Error>;
