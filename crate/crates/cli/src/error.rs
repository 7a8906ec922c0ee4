use hazard_core::autoencoder::CheckpointError;
use hazard_core::dataset::DatasetError;
use hazard_core::detector::DetectorError;
use hazard_core::evaluation::EvalError;
use hazard_core::training::TrainingError;
use hazard_core::TensorError;

/// A failed run. The variant decides the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io failure: {0}")]
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
            Failure::Io(_) => 5,
        }
    }

    /// Prefix the message with where it happened.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            Failure::Config(m) => Failure::Config(format!("{what}: {m}")),
            Failure::Data(m) => Failure::Data(format!("{what}: {m}")),
            Failure::Numeric(m) => Failure::Numeric(format!("{what}: {m}")),
            Failure::Io(m) => Failure::Io(format!("{what}: {m}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, Failure>;

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => Failure::Io(e.to_string()),
            DatasetError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => Failure::Io(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFiniteGradient(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TrainingError> for Failure {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::Config(_) | TrainingError::Model(_) => Failure::Config(e.to_string()),
            TrainingError::NonFiniteLoss { .. } | TrainingError::NonFiniteValidation(_) => Failure::Numeric(e.to_string()),
            TrainingError::Tensor(t) => t.into(),
            TrainingError::Io(io) => io.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<DetectorError> for Failure {
    fn from(e: DetectorError) -> Self {
        match e {
            DetectorError::WholeFramePatchCount { .. }
            | DetectorError::ZeroPatchCount
            | DetectorError::InvalidQuantile(_)
            | DetectorError::InvalidPercentile(_)
            | DetectorError::InvalidThreshold(_) => Failure::Config(e.to_string()),
            DetectorError::Tensor(t) => t.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(io) => io.into(),
            EvalError::NonFiniteScore(_) => Failure::Numeric(e.to_string()),
            EvalError::Detector(d) => d.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}
