//! Machine-readable failures and run manifests.

use crate::config::{ConfigError, ExperimentConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    ConfigInvalid,
    UnknownKey,
    MissingCheckpoint,
    MissingDataset,
    MissingHistory,
    MissingPredictions,
    TargetExists,
    Diverged,
    ContractViolation,
    InvalidData,
    Io,
}

impl ErrorCode {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::ConfigInvalid | Self::UnknownKey => 2,
            Self::MissingCheckpoint | Self::MissingDataset | Self::MissingHistory | Self::MissingPredictions => 3,
            Self::TargetExists => 4,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct CliError {
    pub code: ErrorCode,
    pub message: String,
}

impl CliError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    /// `{"error": {"code": ..., "message": ...}}`
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<advtt::Error> for CliError {
    fn from(e: advtt::Error) -> Self {
        use advtt::Error as E;
        let code = match &e {
            E::Config(_) => ErrorCode::ConfigInvalid,
            E::Contract(_) => ErrorCode::ContractViolation,
            E::Diverged { .. } => ErrorCode::Diverged,
            E::Missing { what, .. } => match what.as_str() {
                "checkpoint" => ErrorCode::MissingCheckpoint,
                "dataset" => ErrorCode::MissingDataset,
                "history" => ErrorCode::MissingHistory,
                _ => ErrorCode::MissingPredictions,
            },
            E::Shape(_) | E::DegenerateVolume { .. } | E::Format(_) | E::Json(_) => ErrorCode::InvalidData,
            E::Io(_) => ErrorCode::Io,
        };
        Self::new(code, e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::UnknownKey { .. } => ErrorCode::UnknownKey,
            _ => ErrorCode::ConfigInvalid,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ErrorCode::Io, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(ErrorCode::InvalidData, e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: RunStatus,
    pub code_version: String,
    /// Full configuration as loadable `key = value` text.
    pub config: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    /// Outputs, relative to the run directory when inside it.
    pub artifacts: Vec<PathBuf>,
    pub error: Option<CliError>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn start(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_owned(),
            status: RunStatus::Running,
            code_version: env!("CARGO_PKG_VERSION").to_owned(),
            config: cfg.to_text(),
            seed: cfg.seed,
            started_unix: now(),
            finished_unix: None,
            artifacts: Vec::new(),
            error: None,
        }
    }

    pub fn finish(&mut self, run_dir: &Path, outcome: Result<Vec<PathBuf>, CliError>) {
        self.finished_unix = Some(now());
        match outcome {
            Ok(artifacts) => {
                self.status = RunStatus::Completed;
                self.artifacts = artifacts.into_iter().map(|p| p.strip_prefix(run_dir).map(Path::to_path_buf).unwrap_or(p)).collect();
            }
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(e);
            }
        }
    }

    pub fn path(run_dir: &Path, command: &str) -> PathBuf {
        run_dir.join("manifests").join(format!("{command}.json"))
    }

    /// Writes through a temporary file and a rename.
    pub fn write(&self, run_dir: &Path) -> std::io::Result<PathBuf> {
        let path = Self::path(run_dir, &self.command);
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_json_carries_the_code() {
        let e: CliError = advtt::Error::Missing { what: "checkpoint".into(), path: "/x".into() }.into();
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["error"]["code"], "MISSING_CHECKPOINT");
        assert_eq!(e.code.exit_code(), 3);
    }

    #[test]
    fn manifest_round_trip_and_reconstruction() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.set("seed", "11").unwrap();
        let mut m = RunManifest::start("train", &cfg);
        m.write(dir.path()).unwrap();
        m.finish(dir.path(), Ok(vec![dir.path().join("history.csv")]));
        let path = m.write(dir.path()).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.status, RunStatus::Completed);
        assert_eq!(back.artifacts, vec![PathBuf::from("history.csv")]);
        let mut rebuilt = ExperimentConfig::default();
        rebuilt.apply(&crate::config::parse_text(&back.config, "manifest", None).unwrap()).unwrap();
        assert_eq!(rebuilt, cfg);
    }
}
