//! Batch evaluation: dataset ingestion, per-item episodes on a worker pool,
//! JSONL run artifacts and summary reports.

mod dataset;
mod report;
mod run;

pub use dataset::{ingest_dataset, parse_dataset, DatasetRecord};
pub use report::{
    answers_match, difference_profile, emit_report, report_row, write_profile_csv, write_summary,
    ReportRow,
};
pub use run::{
    compare_methods, read_artifact, run_evaluation, write_artifact, ArtifactHeader, Comparison,
    ItemOutcome, ItemRecord, ItemTrace, Method, RunArtifact,
};

use crate::backends::{Backend, HttpBackend, HttpConfig, MockBackend};
use crate::planner::PlanConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("difference profile needs two artifacts over shared item ids")]
    MismatchedItems,
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub mode: BackendMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene_dir: Option<PathBuf>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let http = HttpConfig::new("");
        Self {
            mode: BackendMode::Mock,
            base_url: None,
            scene_dir: None,
            timeout_ms: http.timeout_ms,
            max_retries: http.max_retries,
            backoff_base_ms: http.backoff_base_ms,
            max_in_flight: http.max_in_flight,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        match self.mode {
            BackendMode::Mock if self.scene_dir.is_none() => {
                Err("mock backend requires a scene directory".into())
            }
            BackendMode::Http if self.base_url.as_deref().unwrap_or("").is_empty() => {
                Err("http backend requires a base url".into())
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self, seed: u64) -> Result<Box<dyn Backend>, HarnessError> {
        self.validate().map_err(HarnessError::Config)?;
        match self.mode {
            BackendMode::Mock => {
                let dir = self.scene_dir.as_deref().unwrap();
                Ok(Box::new(
                    MockBackend::from_dir(dir, seed).map_err(HarnessError::Config)?,
                ))
            }
            BackendMode::Http => {
                let cfg = HttpConfig {
                    base_url: self.base_url.clone().unwrap(),
                    timeout_ms: self.timeout_ms,
                    max_retries: self.max_retries,
                    backoff_base_ms: self.backoff_base_ms,
                    max_in_flight: self.max_in_flight,
                };
                Ok(Box::new(
                    HttpBackend::new(cfg).map_err(HarnessError::Config)?,
                ))
            }
        }
    }
}

/// Everything needed to reproduce a run. Snapshotted into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub backend: BackendConfig,
    pub plan: PlanConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 4,
            backend: BackendConfig::default(),
            plan: PlanConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.workers == 0 {
            return Err(HarnessError::Config("workers must be at least 1".into()));
        }
        self.plan.validate().map_err(HarnessError::Config)?;
        self.backend.validate().map_err(HarnessError::Config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backend_mode_requirements() {
        let mut b = BackendConfig::default();
        assert!(b.validate().is_err());
        b.scene_dir = Some("scenes".into());
        assert!(b.validate().is_ok());
        b.mode = BackendMode::Http;
        assert!(b.validate().is_err());
        b.base_url = Some("http://localhost:8000".into());
        assert!(b.validate().is_ok());
    }

    #[test]
    fn defaults_snapshot() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.plan.verification.alpha, 0.7);
        assert_eq!(cfg.plan.verification.box_threshold, 0.35);
        assert_eq!(cfg.plan.verification.text_threshold, 0.25);
        assert_eq!(cfg.plan.verification.tau_p, 0.4);
        assert_eq!(cfg.plan.step_threshold_c, 0.6);
        assert_eq!(cfg.backend.max_retries, 3);
        assert_eq!(cfg.backend.backoff_base_ms, 250);
        assert_eq!(cfg.backend.max_in_flight, 8);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
