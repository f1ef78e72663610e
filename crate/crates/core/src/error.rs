use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("invalid truncation: lo ({lo}) must be below hi ({hi})")]
    Truncation { lo: f64, hi: f64 },

    #[error("censoring bounds out of order: w_l = {lower} > w_u = {upper}")]
    Bounds { lower: f64, upper: f64 },

    #[error("normal approximation failed: covariance not positive definite (smallest eigenvalue {eigenvalue:e})")]
    Approximation { eigenvalue: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("handoff schema error: {0}")]
    Schema(String),

    #[error("sampler initialization failed: {0}")]
    Init(String),

    #[error("diagnostics error: {0}")]
    Diagnostics(String),

    #[error("convergence gate failed at site {site}: {detail}")]
    Convergence { site: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
