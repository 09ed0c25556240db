use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("node {0} is not a traced parameter")]
    UntracedParameter(usize),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("every target position is padding")]
    AllPadded,

    #[error("malformed parameter taxonomy: {0}")]
    Taxonomy(String),

    #[error("unknown parameter name `{0}`")]
    UnknownName(String),

    #[error("structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite {what} at step {step}")]
    NonFiniteTraining { what: &'static str, step: usize },

    #[error("eval matrix: {0}")]
    Matrix(String),

    #[error("task: {0}")]
    Task(String),

    #[error("run aborted in round {round}: {source}")]
    Aborted { round: usize, partial: Box<crate::continual::EvalMatrix>, source: Box<Error> },

    #[error("checkpoint {path}: {kind}")]
    Checkpoint { path: PathBuf, kind: CheckpointError },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("file truncated: expected at least {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("unsupported format version {found} (reader supports {supported})")]
    Version { found: u32, supported: u32 },

    #[error("checksum mismatch for tensor `{name}`")]
    Checksum { name: String },

    #[error("tensor dtype {file} does not match session dtype {session}; pass allow_conversion to convert")]
    DtypeMismatch { file: String, session: String },

    #[error("refusing to save tensor `{name}` containing NaN")]
    NanTensor { name: String },

    #[error("malformed container: {0}")]
    Malformed(String),
}
