use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by front-ends to pick exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input files, configuration or arguments.
    Input,
    /// Backbone model loading or inference.
    Model,
    /// Training / evaluation.
    Evaluation,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset root {0} does not exist or is not a directory")]
    DatasetRoot(PathBuf),

    #[error("dataset root {0} contains no labeled images")]
    EmptyDataset(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unrecognized class folder(s) under dataset root: {}", .0.join(", "))]
    Layout(Vec<String>),

    #[error("stratification error: {0}")]
    Stratify(String),

    #[error("label error: index {index} out of range for {num_classes} classes")]
    Label { index: usize, num_classes: usize },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("backbone manifest error: {0}")]
    Manifest(String),

    #[error("failed to load model {path}: {reason}")]
    ModelLoad { path: PathBuf, reason: String },

    #[error("feature extraction failed: {0}")]
    Extraction(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("failed to decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable machine-readable diagnostic code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DatasetRoot(_) | Error::EmptyDataset(_) => "E_DATASET_ROOT",
            Error::Config(_) => "E_CONFIG",
            Error::Layout(_) => "E_LAYOUT",
            Error::Stratify(_) => "E_STRATIFY",
            Error::Label { .. } => "E_LABEL",
            Error::Geometry(_) => "E_GEOMETRY",
            Error::Shape(_) => "E_SHAPE",
            Error::Manifest(_) => "E_MANIFEST",
            Error::ModelLoad { .. } => "E_MODEL_LOAD",
            Error::Extraction(_) => "E_EXTRACTION",
            Error::Data(_) => "E_DATA",
            Error::Fusion(_) => "E_FUSION",
            Error::Metric(_) => "E_METRIC",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Fold { source, .. } => source.code(),
            Error::Image { .. } => "E_IMAGE",
            Error::Io { .. } => "E_IO",
            Error::Json { .. } => "E_JSON",
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::ModelLoad { .. } | Error::Manifest(_) | Error::Extraction(_) => {
                ErrorKind::Model
            }
            Error::Stratify(_)
            | Error::Data(_)
            | Error::Fusion(_)
            | Error::Metric(_)
            | Error::Fold { .. } => ErrorKind::Evaluation,
            _ => ErrorKind::Input,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
