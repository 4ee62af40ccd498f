//! Error classes and their process exit codes.

use std::path::Path;

use dle_core::aggregate::AggregateError;
use dle_core::metrics::MetricsError;
use dle_core::model::ModelError;
use dle_core::oracle::OracleError;
use dle_core::truncation::RuleError;
use dle_core::DleError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unreadable inputs, unparsable rules or models.
    #[error("configuration error: {0}")]
    Config(String),
    /// Model or transport failure while generating.
    #[error("model error: {0}")]
    Model(String),
    /// An internal invariant did not hold.
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Model(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Config(format!("{}: {e}", path.display()))
    }
}

/// Errors raised while loading a model or tokenizing inputs are
/// configuration problems.
pub fn load_error(e: ModelError) -> CliError {
    match e {
        ModelError::Remote(_) => CliError::Model(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

impl From<RuleError> for CliError {
    fn from(e: RuleError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<AggregateError> for CliError {
    fn from(e: AggregateError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Invariant(e.to_string())
    }
}

impl From<DleError> for CliError {
    fn from(e: DleError) -> Self {
        match e {
            DleError::Model(m) => CliError::Model(m.to_string()),
            DleError::Tree(_) | DleError::EmptyFrontier => CliError::Invariant(e.to_string()),
            DleError::InvalidBudget(_) | DleError::InvalidPolicy(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Model(m) => CliError::Model(m.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}
