use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the analysis core.
///
/// Every variant maps to the module that produced it (see [`Error::module`]) so
/// front ends can tag messages without inspecting the payload.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("I/O error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor format error: {0}")]
    Format(String),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("tensor size error: {0}")]
    Size(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("scene generation error: {0}")]
    Generation(String),

    #[error("dataset write failed at sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("polygon classification error: {0}")]
    Classification(String),

    #[error("unsupported relation for scoring: {0}")]
    UnsupportedRelation(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("token id {0} is not in the vocabulary")]
    Vocabulary(u32),

    #[error("word {0:?} is not in the caption vocabulary")]
    UnknownWord(String),

    #[error("attention row check failed: {0}")]
    AttentionRow(String),

    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("edit plan error: {0}")]
    Plan(String),

    #[error("intervention plan failed validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Validation(Vec<crate::edit::PlanViolation>),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt {
            path: path.into(),
            source,
        }
    }

    /// Short tag naming the subsystem the error belongs to.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Io(_) | Error::IoAt { .. } | Error::Json(_) => "io",
            Error::Format(_) | Error::UnsupportedDtype(_) | Error::Size(_) | Error::Unsupported(_) => {
                "tensor-io"
            }
            Error::Generation(_) | Error::Sample { .. } => "scene-gen",
            Error::Image(_)
            | Error::Classification(_)
            | Error::UnsupportedRelation(_)
            | Error::Aggregation(_) => "raster-eval",
            Error::Vocabulary(_) | Error::UnknownWord(_) => "text-encoding",
            Error::AttentionRow(_) | Error::EmptyResult(_) => "attn-synopsis",
            Error::DegenerateData(_) => "varpart",
            Error::Plan(_) | Error::Validation(_) => "embed-edit",
            Error::Input(_) => "input",
        }
    }
}
