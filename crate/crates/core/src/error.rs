use thiserror::Error;

/// Unified error type for parsing, configuration, integration and fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at byte {offset}: {msg}")]
    Syntax { offset: usize, msg: String },

    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },

    #[error("function `{name}` expects {expected} argument(s), got {got}")]
    Arity {
        name: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("variable `{0}` is not bound in this evaluation")]
    UnboundVariable(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("projector invariant violated: {0}")]
    Projector(String),

    #[error("integration failure: {0}")]
    Integration(String),

    #[error("solution magnitude exceeded {limit:e} at t = {t}")]
    BlowUp { t: f64, limit: f64 },

    #[error("no exponential dichotomy fits the sampled data: {0}")]
    NoDichotomy(String),

    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),

    #[error("divergent tail: {0}")]
    DivergentTail(String),

    #[error("fixed-point iteration did not converge within {0} iterations")]
    NonConvergence(usize),

    #[error("invalid constants: {0}")]
    InvalidBundle(String),
}

pub type Result<T> = std::result::Result<T, Error>;
