use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("softmax row {0} has no allowed entries")]
    DegenerateRow(usize),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("at least one context example is required")]
    EmptyContext,

    #[error("mask has {mask} slots but layout has {layout}")]
    LayoutMismatch { mask: usize, layout: usize },

    #[error("sequence of {tokens} tokens exceeds the absolute position table ({capacity})")]
    PositionCapacity { tokens: usize, capacity: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("prediction position {token} can see its own label token {label}")]
    Leakage { token: usize, label: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
