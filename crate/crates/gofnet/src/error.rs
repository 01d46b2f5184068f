use thiserror::Error;

#[derive(Debug, Error)]
pub enum GofError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid network data: {0}")]
    InvalidNetwork(String),

    #[error("covariate coding failed: {0}")]
    Covariates(String),

    #[error("fit failed for K = {k}: {reason}")]
    FitFailed { k: usize, reason: String },

    #[error("model selection failed: {0}")]
    ModelSelect(String),

    #[error("simulation config invalid: {0}")]
    Simulation(String),

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GofError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        GofError::Io {
            path: path.into(),
            source,
        }
    }
}
