//! Error type shared by every stage of the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("index out of range in {what}: index {index} not < {bound}")]
    IndexOutOfRange {
        what: String,
        index: usize,
        bound: usize,
    },

    #[error("matrix {name} has numerical rank {rank}, expected {expected}")]
    Rank {
        name: String,
        rank: usize,
        expected: usize,
    },

    #[error("singular or ill-conditioned operator in {what} (condition estimate {cond:e})")]
    Singular { what: String, cond: f64 },

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:e})")]
    NotConverged {
        what: String,
        iterations: usize,
        residual: f64,
    },

    #[error("no stabilizing solution: {0}")]
    Unstabilizable(String),

    #[error("size guard in {what}: {got} exceeds limit {limit}")]
    Guard {
        what: String,
        limit: usize,
        got: usize,
    },

    #[error("state is not discretely divergence-free: |G^T y| = {norm:e}")]
    NotDivergenceFree { norm: f64 },

    #[error("invariant violated in {what}: defect {defect:e} > {tol:e}")]
    Invariant { what: String, defect: f64, tol: f64 },

    #[error("step size underflow at t = {t}: |y| = {norm:e}")]
    StepUnderflow { t: f64, norm: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("descent stagnated with gradient norm {grad:e} (tolerance {tol:e})")]
    Stagnation { grad: f64, tol: f64 },

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }

    pub(crate) fn at_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
