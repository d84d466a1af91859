use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("checkpoint is corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint shape mismatch for {name}: stored {stored:?}, model {model:?}")]
    CheckpointShape { name: String, stored: Vec<usize>, model: Vec<usize> },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
