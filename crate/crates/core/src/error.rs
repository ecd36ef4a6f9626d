use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("curve horizon exceeded: requested {requested:.6}, support ends at {support:.6}")]
    HorizonExceeded { requested: f64, support: f64 },

    #[error("option price {price} outside arbitrage bounds [{lower}, {upper})")]
    OutOfBoundsPrice { price: f64, lower: f64, upper: f64 },

    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("mapped strike {k} is not positive")]
    MappedStrikeNonpositive { k: f64 },

    #[error("normalized strike {k} is at or below the support bound {bound}")]
    BelowSupport { k: f64, bound: f64 },

    #[error("mapped strike {k} outside the PDE grid (0, {k_max})")]
    MappedStrikeOutOfGrid { k: f64, k_max: f64 },

    #[error("tridiagonal solve failed at row {row}")]
    TridiagonalFailure { row: usize },

    #[error("calibration did not converge after {iterations} iterations (max error {max_error_bp:.4}bp)")]
    NoConvergence { iterations: usize, max_error_bp: f64 },

    #[error("infeasible state: {0}")]
    InfeasibleState(String),

    #[error("step called on a finished episode")]
    StepAfterDone,

    #[error("non-finite gradient in policy update")]
    NonfiniteGradient,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
