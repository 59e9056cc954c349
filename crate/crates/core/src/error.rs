use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("Newton iteration failed to converge: {0}")]
    Convergence(String),

    #[error("no equilibrium rod position in [0, 1]: {0}")]
    InfeasibleEquilibrium(String),

    #[error("integration failure at t = {t} s: {reason}")]
    IntegrationFailure { t: f64, reason: String },

    #[error("scenario generation failed: {0}")]
    Generation(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
