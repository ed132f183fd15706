use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions incompatible with an operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A network or layer description is internally inconsistent.
    #[error("spec error: {0}")]
    Spec(String),

    /// Bad run configuration (unknown key, type error, invalid value).
    #[error("config error: {0}")]
    Config(String),

    /// Bad input data (labels out of range, malformed files, missing samples).
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure during training (non-finite loss or gradient).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint file problems, each case distinct by construction.
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Distinct failure modes when reading or writing checkpoint files.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"ICNT\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    BadVersion { expected: u32, found: u32 },

    #[error("file truncated at byte {offset}")]
    Truncated { offset: usize },

    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },

    #[error("config hash mismatch: checkpoint {found:#018x}, current model {expected:#018x}")]
    ConfigHash { expected: u64, found: u64 },

    #[error("tensor {name}: dtype {found:?} does not match model dtype {expected:?}")]
    DtypeMismatch {
        name: String,
        expected: crate::tensor::DType,
        found: crate::tensor::DType,
    },

    #[error("tensor {name}: dims {found:?} do not match model dims {expected:?}")]
    DimsMismatch {
        name: String,
        expected: [u32; 4],
        found: [u32; 4],
    },

    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),

    #[error("checkpoint contains unknown tensor {0}")]
    UnknownTensor(String),

    #[error("invalid tensor name (not utf-8) at byte {offset}")]
    BadName { offset: usize },

    #[error("invalid dtype byte {0}")]
    BadDtype(u8),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
