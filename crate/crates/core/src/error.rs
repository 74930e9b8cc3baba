use thiserror::Error;

pub type Result<T> = std::result::Result<T, MixregError>;

#[derive(Debug, Error)]
pub enum MixregError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e}, tolerance {tolerance:e})")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("eigensolver did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("need at least 2 admissible (dist_t, dist_t+1) pairs, found {found}")]
    InsufficientPoints { found: usize },

    #[error("instance carries no latent labels")]
    MissingLabels,

    #[error("operation requires K = 2 components, got K = {0}")]
    UnsupportedK(usize),

    #[error("cannot split {n} samples into {groups} groups")]
    TooManyGroups { groups: usize, n: usize },

    #[error("no stable step size: even the initial step {gamma0:e} fails")]
    NoStableStep { gamma0: f64 },

    #[error("iterates diverged at round {round} (loss {loss:e})")]
    Divergence { round: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MixregError {
    /// True for errors that come from a malformed experiment or argument
    /// rather than from a solver.
    pub fn is_spec_error(&self) -> bool {
        matches!(
            self,
            MixregError::InvalidSpec(_) | MixregError::InvalidArgument(_) | MixregError::Parse(_)
        )
    }
}
