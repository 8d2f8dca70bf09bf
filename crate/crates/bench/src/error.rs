use std::path::PathBuf;

use serde_json::json;
use tactile_core::dataset::DatasetError;
use tactile_core::estimator::EstimatorError;
use tactile_core::image::ImageError;
use tactile_core::mechanics::MechanicsError;
use tactile_core::render::RenderError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("leakage: {0}")]
    Leakage(String),
    #[error("report schema: {0}")]
    Schema(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Mechanics(#[from] MechanicsError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl BenchError {
    pub fn kind(&self) -> &'static str {
        match self {
            BenchError::Config(_) => "config",
            BenchError::Protocol(_) => "protocol",
            BenchError::Leakage(_) => "leakage",
            BenchError::Schema(_) => "schema",
            BenchError::Io { .. } => "io",
            BenchError::Json { .. } => "json",
            BenchError::Estimator(EstimatorError::Leakage(_)) => "leakage",
            BenchError::Estimator(_) => "estimator",
            BenchError::Dataset(_) => "dataset",
            BenchError::Render(_) => "render",
            BenchError::Mechanics(_) => "mechanics",
            BenchError::Image(_) => "image",
        }
    }

    /// Machine-readable form printed on stderr by the CLI.
    pub fn to_json(&self) -> String {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> BenchError {
    let path = path.into();
    move |source| BenchError::Io { path, source }
}

pub(crate) fn json_err(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> BenchError {
    let path = path.into();
    move |source| BenchError::Json { path, source }
}
