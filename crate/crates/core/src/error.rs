use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("node {0} has an empty neighborhood")]
    EmptyNeighborhood(usize),
    #[error("no parameters registered for edge type {0}")]
    UnknownEdgeType(String),
    #[error("video `{0}` has no speaking turns")]
    EmptyVideo(String),
    #[error("turn {turn} of video `{video}` has no modality nodes")]
    EmptyTurn { video: String, turn: usize },
    #[error("{modality} features: expected dim {expected}, got {got}")]
    Dim {
        modality: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("fewer than two speaking turns: no negatives")]
    NoNegatives,
    #[error("no augmentation is enabled")]
    NoAugmentation,
    #[error("empty sequence")]
    EmptySequence,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no video qualifies for the speaker probe")]
    NoQualifyingVideos,
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Analysis(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, shapes: &[&[usize]]) -> Result<T> {
    Err(Error::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    })
}
