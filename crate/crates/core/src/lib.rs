//! Online inference of graph topology from streaming nodal signals, using a
//! Gaussian-kernel expansion whose derivative sections encode edge strengths.
//!
//! The crate has three layers:
//!
//! * the adaptive estimator itself ([`online`]), a stochastic-gradient update
//!   on kernel and kernel-derivative features with a group regularizer that
//!   promotes sparse connectivity;
//! * an exact moment engine ([`moments`]) producing every second- and
//!   fourth-order statistic of the feature vectors in closed form for
//!   Gaussian inputs, plus the batch solver ([`batch`]) for the optimal
//!   coefficient vector;
//! * performance models ([`theory`]) that evolve the mean and second moment
//!   of the coefficient error over iterations and predict steady-state MSD,
//!   to be compared against Monte-Carlo ensembles driven by [`harness`].
//!
//! Index convention used throughout: a stacked feature vector interleaves
//! per-node blocks of dictionary length `d`, so flat index `m*d + q`
//! addresses (input node `m`, dictionary atom `q`), both 0-based. Prose and
//! configuration use 1-based node numbering; the boundary is the config
//! parser.

pub mod batch;
pub mod graph;
pub mod harness;
pub mod kernel;
pub mod moments;
pub mod online;
pub mod theory;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("model construction failed: {0}")]
    ModelConstruction(String),

    #[error("matrix is numerically singular ({0})")]
    Singular(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotPsd(f64),

    #[error("root finder did not converge after {iters} iterations (residual {residual:.3e})")]
    RootFinder { iters: usize, residual: f64 },

    #[error("estimate diverged at iteration {0}")]
    Diverged(usize),

    #[error("solver did not converge: residual {residual:.3e} after {iters} iterations")]
    NonConvergence { iters: usize, residual: f64 },

    #[error("unstable configuration: {0}")]
    Unstable(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Wraps an error with the pipeline stage it occurred in.
    pub fn stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
