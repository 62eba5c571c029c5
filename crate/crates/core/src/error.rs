use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation was given incompatible shapes.
    #[error("shape mismatch at {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Backward pass requested from a node that is not a 1x1 scalar.
    #[error("gradient requires a scalar loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    /// Forward values are missing (evaluate was not called first).
    #[error("tape has not been evaluated; call evaluate before gradient")]
    NotEvaluated,

    /// A named leaf had no binding at evaluation time.
    #[error("no binding provided for tape leaf '{name}'")]
    MissingBinding { name: String },

    /// Operation on an empty replay buffer.
    #[error("replay buffer is empty")]
    EmptyBuffer,

    /// A training update was given an empty batch.
    #[error("empty batch passed to {context}")]
    EmptyBatch { context: String },

    /// A permutation argument was not a bijection on the expected range.
    #[error("invalid permutation for {context}: {reason}")]
    InvalidPermutation { context: String, reason: String },

    /// Configuration validation failure; names the offending key.
    #[error("invalid config value for '{key}': {reason}")]
    Config { key: String, reason: String },

    /// Configuration file could not be parsed.
    #[error("failed to parse config {path}: {message}")]
    ConfigParse { path: String, message: String },

    /// Unknown environment name.
    #[error("unknown environment '{name}' (expected \"mountaincar\" or \"pointreacher\")")]
    UnknownEnv { name: String },

    /// Checkpoint or buffer-dump container is malformed.
    #[error("bad file format in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Checkpoint version is not supported by this build.
    #[error("unsupported checkpoint version {found} in {path} (supported: {supported})")]
    Version {
        path: String,
        found: u32,
        supported: u32,
    },

    /// A training loss became non-finite; aborts the run with diagnostics.
    #[error("non-finite {loss} loss at episode {episode} (value {value})")]
    DivergedLoss {
        loss: String,
        episode: u64,
        value: f64,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
