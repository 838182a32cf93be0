use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero orbit distance at shift {shift:?}: frequencies are rational at the scanned range")]
    ZeroDistance { shift: Vec<i64> },

    #[error("need at least {need} elements, got {got}")]
    TooFew { need: usize, got: usize },

    #[error("cube is not a proper subset of its ambient set")]
    NotProperSubset,

    #[error("operator has {sites} sites, above the configured cap of {cap}")]
    SizeCap { sites: usize, cap: usize },

    #[error("symmetric eigensolver did not converge (max residual {max_residual:e})")]
    NonConvergence { max_residual: f64 },

    #[error("H - E is singular to machine precision at E = {energy}")]
    Singular { energy: f64 },

    #[error("length scale L_{j} overflows 64 bits")]
    ScaleOverflow { j: i32 },

    #[error("no initial scale L0 >= 2 satisfies the coupling condition at g = {g}")]
    RegimeUnreachable { g: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("site {0:?} is not in the cube")]
    SiteOutsideCube(Vec<i64>),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
