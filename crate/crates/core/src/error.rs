use thiserror::Error;

/// Unified error type for the engine.
///
/// Checkpoint and dataset failure modes are deliberately split into
/// separate variants so callers can distinguish a corrupt manifest from a
/// truncated weight blob, or a bad magic number from a checksum mismatch.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    TruncatedFile {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("checksum mismatch for {path}: expected {expected}, computed {computed}")]
    Checksum {
        path: String,
        expected: String,
        computed: String,
    },

    #[error("checkpoint manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint blob truncated: expected {expected} bytes, found {found}")]
    TruncatedBlob { expected: usize, found: usize },

    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShape(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("benchmark error: {0}")]
    Bench(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
