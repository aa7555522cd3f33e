use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("gaussian is behind the camera (depth {depth} <= near {near})")]
    BehindCamera { depth: f64, near: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("forward state does not match the splats passed to the backward pass")]
    StaleState,

    #[error("group {0} has no members")]
    EmptyGroup(u32),

    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    OutOfBounds {
        u: i64,
        v: i64,
        width: usize,
        height: usize,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("could not place {objects} objects after {tries} tries")]
    InfeasiblePlacement { objects: usize, tries: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown query '{name}'; valid names: {}", valid.join(", "))]
    UnknownQuery { name: String, valid: Vec<String> },
}
