use thiserror::Error;

/// Errors produced by the graph compiler and its analyses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to decode model: {0}")]
    Decode(String),

    #[error("unsupported operator `{op}` at node `{node}`")]
    UnsupportedOp { node: String, op: String },

    #[error("node `{node}`: unsupported attribute `{attr}`: {detail}")]
    UnsupportedAttribute {
        node: String,
        attr: String,
        detail: String,
    },

    #[error("node `{node}`: shape mismatch: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("missing input tensor `{0}`")]
    MissingInput(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(node: &str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            node: node.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn attr(node: &str, attr: &str, detail: impl Into<String>) -> Self {
        Error::UnsupportedAttribute {
            node: node.to_string(),
            attr: attr.to_string(),
            detail: detail.into(),
        }
    }
}
