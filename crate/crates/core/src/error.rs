use thiserror::Error;

pub type Result<T> = std::result::Result<T, CirError>;

#[derive(Debug, Error)]
pub enum CirError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// A row of a self-masked softmax has no surviving entry.
    #[error("reconstruction degenerate: sample {sample} has an empty support set under {policy}")]
    EmptySupport { sample: usize, policy: String },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    /// Failure inside the training loop, tagged with the offending batch.
    #[error("epoch {epoch}, batch {batch}: {source}")]
    AtBatch {
        epoch: u64,
        batch: u64,
        #[source]
        source: Box<CirError>,
    },

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CirError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        CirError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
