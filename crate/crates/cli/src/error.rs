use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use toolplan::plan::Violation;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {field}: {message}")]
    Schema { path: PathBuf, field: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(#[from] toolplan::config::ConfigError),
    #[error("unknown task id {0}")]
    UnknownTask(String),
    #[error("plan violates {} rule(s) for task {task}", violations.len())]
    InvalidPlan { task: String, violations: Vec<Violation> },
    #[error("checkpoint was trained against a different registry")]
    RegistryMismatch,
    #[error("{0}")]
    Engine(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn engine(e: impl std::fmt::Display) -> Self {
        CliError::Engine(e.to_string())
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Schema { .. } => "schema",
            CliError::Config(_) => "config",
            CliError::UnknownTask(_) => "unknown_task",
            CliError::InvalidPlan { .. } => "invalid_plan",
            CliError::RegistryMismatch => "registry_mismatch",
            CliError::Engine(_) => "engine",
            CliError::Usage(_) => "usage",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            CliError::Schema { path, field, .. } => {
                v["path"] = json!(path);
                v["field"] = json!(field);
            }
            CliError::Io { path, .. } => v["path"] = json!(path),
            CliError::Config(e) => v["field"] = json!(e.field),
            CliError::InvalidPlan { violations, .. } => v["violations"] = json!(violations),
            _ => {}
        }
        v
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
