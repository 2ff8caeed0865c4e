use std::path::PathBuf;

use crate::model::FilterRef;
use crate::pruner::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {dimension} expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        dimension: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("forward cache is stale: the model changed after the forward pass")]
    StaleCache,

    #[error("checkpoint has bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint descriptor: {0}")]
    Descriptor(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("filter {0} does not exist in the model")]
    UnknownFilter(FilterRef),

    #[error("filter {0} is not part of the plan")]
    NotInPlan(FilterRef),

    #[error("invalid pruning plan: {}", format_violations(.0))]
    InvalidPlan(Vec<Violation>),

    #[error("cannot select {requested} filters out of {total}")]
    PlanTooLarge { requested: usize, total: usize },

    #[error("non-informative pair: {0}")]
    NonInformativePair(String),

    #[error("node {0} not found")]
    NodeNotFound(u64),

    #[error("missing checkpoint for node {node}: {}", path.display())]
    MissingCheckpoint { node: u64, path: PathBuf },

    #[error("session manifest: {0}")]
    Manifest(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cancelled")]
    Cancelled,

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
