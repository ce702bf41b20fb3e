use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BnnError {
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("value {0} is not a sign (expected -1 or +1)")]
    NotASign(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty parameter tensor")]
    EmptyTensor,
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("network carries no latent weights")]
    MissingLatents,
}

/// Model container decoding failures. Each variant maps to a distinct code.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("file truncated")]
    Truncated,
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error(transparent)]
    Network(#[from] BnnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FormatError {
    pub fn code(&self) -> u8 {
        match self {
            FormatError::Truncated => 1,
            FormatError::BadMagic => 2,
            FormatError::UnsupportedVersion(_) => 3,
            FormatError::Checksum { .. } => 4,
            FormatError::Malformed(_) => 5,
            FormatError::Network(_) => 6,
            FormatError::Io(_) => 7,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("gradient tape does not belong to this network state")]
    StaleTape,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("optimizer state does not match parameter shapes")]
    StateMismatch,
    #[error(transparent)]
    Network(#[from] BnnError),
}

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid environment: {0}")]
    InvalidEnv(String),
    #[error("step called on a finished episode; call reset first")]
    StepAfterDone,
    #[error("action {action} out of range for {actions} actions")]
    InvalidAction { action: usize, actions: usize },
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("target and value networks differ in architecture")]
    ArchitectureMismatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss diverged at episode {episode}, step {step}")]
    Diverged {
        episode: usize,
        step: usize,
        checkpoint: Option<std::path::PathBuf>,
    },
    #[error(transparent)]
    Network(#[from] BnnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("property premise fails: network picks action {found} at the center, not {expected}")]
    PremiseMismatch { expected: usize, found: usize },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("internal encoding error: {0}")]
    Internal(String),
    #[error(transparent)]
    Network(#[from] BnnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
