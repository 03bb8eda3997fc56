use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("depth overflow: level {level} exceeds configured maximum {max}")]
    DepthOverflow { level: i32, max: i32 },

    #[error("squares {a} and {b} do not share a base square")]
    DifferentTrees { a: String, b: String },

    #[error("empty collection: {0}")]
    Empty(&'static str),

    #[error("constraint system rank {found} differs from expected {expected} (smallest kept singular value {sigma:.3e})")]
    RankDeficient {
        expected: usize,
        found: usize,
        sigma: f64,
    },

    #[error("moment system ill-conditioned (condition {cond:.3e} > {limit:.1e}); use a smaller kappa or more quadrature panels")]
    IllConditioned { cond: f64, limit: f64 },

    #[error("under-resolved: {what}; need at least {required}")]
    UnderResolved { what: String, required: String },

    #[error(
        "no contraction: estimated |I - T| = {estimate:.4} >= 1; use a smaller eta or larger kappa"
    )]
    NoContraction { estimate: f64 },

    #[error(
        "Neumann series did not reach tolerance {tol:.1e} in {terms} terms (last term {last:.3e})"
    )]
    NeumannStalled { tol: f64, terms: usize, last: f64 },

    #[error("window mismatch: {0}")]
    WindowMismatch(String),

    #[error("level mismatch: {0}")]
    LevelMismatch(String),

    #[error("memory guard: {cells} raster cells exceed cap {cap}")]
    MemoryGuard { cells: usize, cap: usize },

    #[error("tube family generation failed: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        arg,
        reason: reason.into(),
    }
}
