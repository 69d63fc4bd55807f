use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate projection: clip w = {0:e}")]
    DegenerateProjection(f64),

    #[error("no primitive carries label {0}")]
    EmptyObject(u32),

    #[error("forward record does not match the scene/camera passed to backward")]
    StaleForward,

    #[error("primitive {index} is claimed by labels {a} and {b} with identical contribution {contribution:e}")]
    ConflictingLabels {
        index: usize,
        a: u32,
        b: u32,
        contribution: f64,
    },

    #[error("semantic table is empty")]
    EmptyTable,

    #[error("timestep {0} is not part of the motion field")]
    UnknownTimestep(usize),

    #[error("quaternion sum has norm {0:e}")]
    DegenerateQuaternion(f64),

    #[error("scene has no dynamic primitives")]
    NoDynamicPrimitives,

    #[error("missing observation: {0}")]
    MissingObservation(String),

    #[error("motion field is not in rigid mode")]
    NotRigidMode,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("rigidity loss needs at least 2 primitives, got {0}")]
    TooFewPrimitives(usize),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: expected format version {expected}, found {found:?}", path.display())]
    VersionMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("invalid camera {id}: {msg}")]
    InvalidCamera { id: String, msg: String },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("grasp provider found no grasp: {0}")]
    NoGrasp(String),

    #[error("operation {0:?} is not implemented")]
    NotImplemented(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed or missing input files.
    Input,
    /// Well-formed input that violates a domain constraint.
    Domain,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse { .. }
            | Error::VersionMismatch { .. }
            | Error::Io { .. }
            | Error::MissingObservation(_)
            | Error::DimMismatch { .. }
            | Error::InvalidCamera { .. } => ErrorKind::Input,
            _ => ErrorKind::Domain,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
