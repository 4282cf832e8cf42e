use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent network, run or method configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller handed in data that violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    /// API misuse, e.g. asking for a backward pass without a recorded tape.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("stage `{stage}` failed (seed {seed}): {source}")]
    Stage {
        stage: &'static str,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

/// Failures while reading datasets, checkpoints and attribution dumps.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("malformed manifest {}: {reason}", path.display())]
    MalformedManifest { path: PathBuf, reason: String },

    #[error("missing data file {}", path.display())]
    MissingBlob { path: PathBuf },

    #[error("truncated data file {}: need {expected} bytes, found {actual}", path.display())]
    TruncatedBlob {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("example {example}: beat {beat}: {reason}")]
    InvalidAnnotation {
        example: usize,
        beat: usize,
        reason: String,
    },

    #[error("unsupported format version {found} in {}", path.display())]
    Version { path: PathBuf, found: u32 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str, seed: u64) -> Self {
        Error::Stage {
            stage,
            seed,
            source: Box::new(self),
        }
    }

    /// Short machine-readable category, used by the CLI for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Usage(_) => "usage",
            Error::Diverged { .. } => "training",
            Error::Load(_) => "load",
            Error::Io { .. } => "io",
            Error::Stage { source, .. } => source.category(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" => 2,
            "config" => 3,
            "input" => 4,
            "load" => 5,
            "io" => 6,
            "training" => 7,
            _ => 1,
        }
    }
}
