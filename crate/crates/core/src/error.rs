use std::path::PathBuf;

use crate::ndgrad::GradError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("timestep {t} outside 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("non-finite {what} at step {t}")]
    NonFinite { what: &'static str, t: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f32 },
    #[error("classifier accuracy {accuracy:.4} below required {required:.4}")]
    AccuracyTooLow { accuracy: f64, required: f64 },
    #[error("model shape mismatch: {0}")]
    ModelShape(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u16 },
    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },
    #[error("{path}: truncated file")]
    Truncated { path: PathBuf },
    #[error("{path}: malformed file: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("missing causal mask")]
    MissingCausalMask,
    #[error("zero-norm feature vector")]
    ZeroNorm,
    #[error("not enough samples: {0}")]
    NotEnoughSamples(String),
    #[error("no samples")]
    NoSamples,
    #[error("trajectory was recorded without state retention")]
    StatesNotRetained,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short stable identifier for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Grad(_) => "grad",
            Error::TimestepOutOfRange { .. } => "timestep_out_of_range",
            Error::Schedule(_) => "schedule",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Diverged { .. } => "diverged",
            Error::AccuracyTooLow { .. } => "accuracy_too_low",
            Error::ModelShape(_) => "model_shape",
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Checksum { .. } => "checksum",
            Error::Truncated { .. } => "truncated",
            Error::Malformed { .. } => "malformed",
            Error::Config { .. } => "config",
            Error::MissingCausalMask => "missing_causal_mask",
            Error::ZeroNorm => "zero_norm",
            Error::NotEnoughSamples(_) => "not_enough_samples",
            Error::NoSamples => "no_samples",
            Error::StatesNotRetained => "states_not_retained",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
