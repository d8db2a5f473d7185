use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid depth frame: {0}")]
    InvalidFrame(String),
    #[error("depth frame has no valid pixels")]
    EmptyView,
    #[error("invalid scene spec: {0}")]
    DegenerateScene(String),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("missing coordinate map: {0}")]
    MissingCoordinateMap(String),
    #[error("batch norm needs at least two active sites in train mode, got {0}")]
    DegenerateBatch(usize),
    #[error("parameter set does not match network config: {0}")]
    ParamMismatch(String),
    #[error("empty correspondence map")]
    EmptyMatches,
    #[error("cannot normalize zero feature row {0}")]
    ZeroRow(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no usable correspondences survived voxelization")]
    SkipStep,
    #[error("malformed {kind} file: {msg}")]
    Format { kind: &'static str, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn format_err(kind: &'static str, msg: impl Into<String>) -> Error {
    Error::Format {
        kind,
        msg: msg.into(),
    }
}
