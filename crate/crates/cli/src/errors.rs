//! Error classification for process exit codes.

use oae_core::data::DataError;
use oae_core::geometry::GeometryError;
use oae_core::pipeline::PipelineError;
use oae_core::transformer::ModelError;

/// Failure classes mapped to exit codes: usage = 1, data = 2,
/// numeric = 3.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: unknown flag/key, malformed value, invalid
    /// configuration.
    Usage(String),
    /// Bad or missing input data: files, formats, datasets.
    Data(String),
    /// Numeric failure at run time: non-finite losses or gradients,
    /// internal tensor faults.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig { .. } => CliError::Usage(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidTrainConfig { .. }
            | PipelineError::NothingOccluded { .. }
            | PipelineError::NothingVisible { .. } => CliError::Usage(e.to_string()),
            PipelineError::CloudTooSmall { .. }
            | PipelineError::EmptyDataset
            | PipelineError::TooFewClasses { .. }
            | PipelineError::FeatureLabelMismatch { .. }
            | PipelineError::MetricsParse { .. } => CliError::Data(e.to_string()),
            PipelineError::Io(e) => CliError::Data(e.to_string()),
            PipelineError::Data(e) => e.into(),
            PipelineError::Geometry(e) => e.into(),
            PipelineError::Model(e) => e.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}
