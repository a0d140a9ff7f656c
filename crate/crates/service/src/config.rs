use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use percept_core::engine::{Durability, EngineSettings};
use percept_core::protocol::SessionState;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid service config: {0}")]
    Invalid(String),
}

/// Codes handed back to the recruiting platform, one per outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionCodes {
    pub completed: String,
    pub failed_colorblind: String,
    pub failed_comprehension: String,
}

impl Default for CompletionCodes {
    fn default() -> Self {
        Self {
            completed: "COMPLETED".into(),
            failed_colorblind: "SCREENED-CV".into(),
            failed_comprehension: "SCREENED-CC".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    FailedColorblind,
    FailedComprehension,
}

impl Outcome {
    pub fn of(state: SessionState) -> Option<Outcome> {
        match state {
            SessionState::Completed => Some(Outcome::Completed),
            SessionState::FailedColorblind => Some(Outcome::FailedColorblind),
            SessionState::FailedComprehension => Some(Outcome::FailedComprehension),
            _ => None,
        }
    }
}

/// What a participant in a terminal session is sent back with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionCode {
    pub outcome: Outcome,
    pub code: String,
    pub redirect_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Event log directory.
    pub data_dir: PathBuf,
    /// Manifest paths are resolved against this directory.
    pub image_root: PathBuf,
    pub durability: Durability,
    /// Bearer token for `/api/v1/admin`. Admin routes are disabled when empty.
    pub admin_token: String,
    pub completion_codes: CompletionCodes,
    /// `{code}` is replaced by the outcome's completion code.
    pub redirect_template: String,
    pub sweep_interval_secs: u64,
    /// Root of session ids; drawn at random on start when absent.
    pub session_seed: Option<u64>,
    pub engine: EngineSettings,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: PathBuf::from("data"),
            image_root: PathBuf::from("images"),
            durability: Durability::Fsync,
            admin_token: String::new(),
            completion_codes: CompletionCodes::default(),
            redirect_template: "https://app.prolific.com/submissions/complete?cc={code}".into(),
            sweep_interval_secs: 30,
            session_seed: None,
            engine: EngineSettings::default(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let config: ServiceConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.completion_codes;
        let codes = [&c.completed, &c.failed_colorblind, &c.failed_comprehension];
        if codes.iter().any(|code| code.trim().is_empty()) {
            return Err(ConfigError::Invalid("completion codes must not be empty".into()));
        }
        if c.completed == c.failed_colorblind
            || c.completed == c.failed_comprehension
            || c.failed_colorblind == c.failed_comprehension
        {
            return Err(ConfigError::Invalid("the three completion codes must be distinct".into()));
        }
        if !self.redirect_template.contains("{code}") {
            return Err(ConfigError::Invalid("redirect_template must contain {code}".into()));
        }
        if self.sweep_interval_secs == 0 {
            return Err(ConfigError::Invalid("sweep_interval_secs must be positive".into()));
        }
        self.engine
            .study
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// The completion code for a session state, if it has one.
    pub fn completion(&self, state: SessionState) -> Option<CompletionCode> {
        let outcome = Outcome::of(state)?;
        let c = &self.completion_codes;
        let code = match outcome {
            Outcome::Completed => &c.completed,
            Outcome::FailedColorblind => &c.failed_colorblind,
            Outcome::FailedComprehension => &c.failed_comprehension,
        };
        Some(CompletionCode {
            outcome,
            code: code.clone(),
            redirect_url: self.redirect_template.replace("{code}", code),
        })
    }
}
