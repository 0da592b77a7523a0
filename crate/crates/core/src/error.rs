use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape: {0}")]
    InputShape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("fixed-point conversion overflow in tensors: {}", .0.join(", "))]
    Conversion(Vec<String>),
    #[error("training diverged at batch {batch}: {detail}")]
    Divergence { batch: usize, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("model format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
