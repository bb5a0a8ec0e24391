use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("level {t} out of range 0..={max}")]
    LevelOutOfRange { t: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("alpha_bar must lie in (0, 1], got {0}")]
    InvalidAlphaBar(f64),

    #[error("invalid condition embedding: {0}")]
    InvalidCondition(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("level ordering violated: {0}")]
    LevelOrder(String),

    #[error("invalid pivot grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::LevelOutOfRange { .. } => "level_out_of_range",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidAlphaBar(_) => "invalid_alpha_bar",
            Error::InvalidCondition(_) => "invalid_condition",
            Error::InvalidModel(_) => "invalid_model",
            Error::NonFinite(_) => "non_finite",
            Error::LevelOrder(_) => "level_order",
            Error::InvalidGrid(_) => "invalid_grid",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
