use potts::coupling::CouplingError;
use potts::model::ModelError;
use potts::samplers::SamplerError;
use potts::tempering::TemperingError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("incompatible sampler: {0}")]
    Compatibility(SamplerError),
    #[error("oracle refused: {0}")]
    OracleTooLarge(ModelError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Sampler(SamplerError),
    #[error(transparent)]
    Tempering(TemperingError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Compatibility(_) => 3,
            CliError::OracleTooLarge(_) => 4,
            _ => 1,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::WrongStateCount { .. } | SamplerError::NegativeCoupling { .. } => CliError::Compatibility(e),
            other => CliError::Sampler(other),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::TooLarge { .. } => CliError::OracleTooLarge(e),
            other => CliError::Model(other),
        }
    }
}

impl From<TemperingError> for CliError {
    fn from(e: TemperingError) -> Self {
        match e {
            TemperingError::Sampler(s) => s.into(),
            other => CliError::Tempering(other),
        }
    }
}
