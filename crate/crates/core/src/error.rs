use thiserror::Error;

/// Which Kalman gain of the sequential analysis failed to factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainStage {
    /// Gain for the y-difference pseudo-observations.
    W1,
    /// Gain for the τ-difference pseudo-observations.
    W2,
    /// Gain for the price data.
    W3,
    /// Combined low-rank innovation solve.
    Joint,
}

impl std::fmt::Display for GainStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GainStage::W1 => "W1",
            GainStage::W2 => "W2",
            GainStage::W3 => "W3",
            GainStage::Joint => "joint",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh parameter `{field}`: {reason}")]
    InvalidMesh { field: &'static str, reason: String },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("quote {index} at (tau={tau}, y={y}) lies outside the mesh")]
    QuoteOutsideMesh { index: usize, tau: f64, y: f64 },

    #[error("duplicate quote location (tau={tau}, y={y})")]
    DuplicateQuote { tau: f64, y: f64 },

    #[error("no usable quotes: {0}")]
    NoQuotes(String),

    #[error("tridiagonal system singular at time level {level}")]
    SingularSystem { level: usize },

    #[error("price {price} is at or below the intrinsic bound {bound}")]
    BelowIntrinsic { price: f64, bound: f64 },

    #[error("price {price} is at or above the upper bound {bound}")]
    AboveSpot { price: f64, bound: f64 },

    #[error("implied volatility did not converge for price {price}")]
    NoConvergence { price: f64 },

    #[error("innovation matrix singular in gain {0}")]
    SingularGain(GainStage),

    #[error("L-curve selection needs at least 4 successful runs, got {0}")]
    TooFewRuns(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidMesh { .. } => "invalid_mesh",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::QuoteOutsideMesh { .. } => "quote_outside_mesh",
            Error::DuplicateQuote { .. } => "duplicate_quote",
            Error::NoQuotes(_) => "no_quotes",
            Error::SingularSystem { .. } => "singular_system",
            Error::BelowIntrinsic { .. } => "below_intrinsic",
            Error::AboveSpot { .. } => "above_spot",
            Error::NoConvergence { .. } => "no_convergence",
            Error::SingularGain(_) => "singular_gain",
            Error::TooFewRuns(_) => "too_few_runs",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Parse { .. } => "parse",
            Error::Config { .. } => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
