use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::alm::AlmConfig;
use crate::engine::EngineConfig;
use crate::problem::{BuiltinSpec, ProblemDef};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: BuiltinSpec,
    #[serde(default)]
    pub alm: AlmConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Sleep added to every converged step, standing in for the assembly
    /// and solve cost of a large model.
    #[serde(default)]
    pub synthetic_step_work_ms: f64,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.alm.validate().map_err(|e| invalid(&e))?;
        self.engine.validate().map_err(|e| invalid(&e))?;
        if self.workers < 1 {
            return Err(ConfigError::Invalid("workers must be >= 1".into()));
        }
        if !(self.synthetic_step_work_ms.is_finite() && self.synthetic_step_work_ms >= 0.0) {
            return Err(ConfigError::Invalid("synthetic_step_work_ms must be >= 0".into()));
        }
        self.problem.build().map_err(|e| invalid(&e))?;
        Ok(())
    }

    pub fn build_problem(&self) -> Result<ProblemDef, ConfigError> {
        let problem = self
            .problem
            .build()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(problem.with_step_work(Duration::from_secs_f64(self.synthetic_step_work_ms / 1e3)))
    }
}

/// Parses and validates a JSON run configuration. Unknown keys are errors.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_config(&text)
}
