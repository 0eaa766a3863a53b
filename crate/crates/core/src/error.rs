use thiserror::Error;

use crate::lemma::LemmaFailure;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    /// A numerical invariant that must hold by construction was violated.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{0}")]
    Lemma(Box<LemmaFailure>),

    #[error("series block {s} could not be built: {source}")]
    SeriesBlock {
        s: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("series depth {depth} is insufficient: need more than {needed}")]
    InsufficientDepth { depth: usize, needed: usize },

    #[error("round {q}: no admissible approximant or filler within built depth {depth}")]
    DepthExhausted { q: usize, depth: usize },

    #[error("round {q}: weighted error {error:.6e} exceeds bound {bound:.6e} (+ tol {tol:.3e})")]
    BoundViolated {
        q: usize,
        error: f64,
        bound: f64,
        tol: f64,
    },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }
}

impl From<LemmaFailure> for Error {
    fn from(f: LemmaFailure) -> Self {
        Error::Lemma(Box::new(f))
    }
}
