use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{0}: no data")]
    Empty(String),

    #[error("point ({x:.3}, {y:.3}, {z:.3}) is behind the camera (depth {depth:.6})")]
    BehindCamera { x: f64, y: f64, z: f64, depth: f64 },

    #[error("invalid camera: {0}")]
    Camera(String),

    #[error("grid geometry mismatch: {0}")]
    Geometry(String),

    #[error("triangulation failed: {0}")]
    Triangulation(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("{0}")]
    Data(String),

    #[error("config: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("verification impossible: {0}")]
    VerificationImpossible(String),

    #[error("model file: {0}")]
    Model(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
