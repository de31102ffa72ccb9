use std::path::PathBuf;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum EccError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("weight file: {0}")]
    WeightFormat(String),
    #[error("parameter `{name}`: {detail}")]
    Weight { name: String, detail: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{}: {detail}", path.display())]
    DatasetFile { path: PathBuf, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
}

impl EccError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EccError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = EccError> = std::result::Result<T, E>;
