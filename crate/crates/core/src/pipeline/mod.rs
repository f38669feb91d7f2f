//! Resumable, file-based orchestration of the curation stages.
//!
//! Each stage reads the previous stage's files and writes its own under
//! `<output>/<stage>/`, together with an `errors.jsonl` ledger of per-video
//! failures and a `.stamp` content hash of everything it read. A rerun whose
//! stamp matches is skipped. Outputs are ordered by video id, so worker
//! count and scheduling never change their bytes.

pub mod cache;
pub mod config;
mod stages;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::llm::{Gateway, HttpGateway, MockGateway, API_KEY_ENV};

pub use cache::{EntryKind, ErrorLedger, LedgerEntry};
pub use config::PipelineConfig;
pub use stages::{AlignmentRecord, AlignedStep, GeneratedRow, SampledWindow, VideoRow};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{}: {message}", path.display())]
    Input { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{stage} failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    pub fn input(path: &Path, message: impl fmt::Display) -> Self {
        Self::Input { path: path.to_path_buf(), message: message.to_string() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn stage(stage: Stage, message: impl fmt::Display) -> Self {
        Self::Stage { stage, message: message.to_string() }
    }

    /// 2 for bad configuration or inputs, 3 for a failing stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Input { .. } => 2,
            Self::Io { .. } | Self::Stage { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Parse,
    Filter,
    Extract,
    Align,
    Assemble,
    Stats,
    Split,
    Sample,
    Eval,
}

impl Stage {
    /// Curation order; `eval` runs last and only when configured.
    pub const ALL: [Stage; 9] = [
        Stage::Parse,
        Stage::Filter,
        Stage::Extract,
        Stage::Align,
        Stage::Assemble,
        Stage::Stats,
        Stage::Split,
        Stage::Sample,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Parse => "parse",
            Stage::Filter => "filter",
            Stage::Extract => "extract",
            Stage::Align => "align",
            Stage::Assemble => "assemble",
            Stage::Stats => "stats",
            Stage::Split => "split",
            Stage::Sample => "sample",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub skipped: bool,
    /// Videos (or records) that produced output.
    pub produced: usize,
    pub rejected: usize,
    pub errors: usize,
}

impl fmt::Display for StageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<8} ", self.stage.name())?;
        if self.skipped {
            write!(f, "up to date ")?;
        }
        write!(f, "{} produced, {} rejected, {} errors", self.produced, self.rejected, self.errors)
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    exec: Execution,
    gateway: Option<Arc<dyn Gateway>>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, exec: Execution) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self { cfg, exec, gateway: None })
    }

    /// Replaces the configured gateway (tests, embedding in other tools).
    pub fn with_gateway(mut self, gateway: Arc<dyn Gateway>) -> Self {
        self.gateway = Some(gateway);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.cfg.paths.output.join(stage.name())
    }

    fn gateway(&mut self) -> Result<Arc<dyn Gateway>, PipelineError> {
        if let Some(g) = &self.gateway {
            return Ok(g.clone());
        }
        let g: Arc<dyn Gateway> = match &self.cfg.mock_responses {
            Some(path) => Arc::new(MockGateway::from_file(path).map_err(|e| PipelineError::input(path, e))?),
            None => {
                if std::env::var_os(API_KEY_ENV).is_none() {
                    return Err(PipelineError::Config(format!(
                        "set {API_KEY_ENV} or point mock_responses at a response script"
                    )));
                }
                Arc::new(HttpGateway::from_env())
            }
        };
        self.gateway = Some(g.clone());
        Ok(g)
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<StageReport, PipelineError> {
        let workers = self.cfg.workers;
        let exec = self.exec;
        let gateway = match stage {
            Stage::Filter | Stage::Extract => Some(self.gateway()?),
            _ => None,
        };
        let ctx = stages::Context { cfg: &self.cfg, exec, gateway: gateway.as_deref() };
        let report = exec.install(workers, || stages::run(&ctx, stage))?;
        log::info!("{report}");
        Ok(report)
    }

    /// Every curation stage in order, then `eval` when it has something to score.
    pub fn run_all(&mut self) -> Result<Vec<StageReport>, PipelineError> {
        let mut reports = Vec::new();
        for stage in Stage::ALL {
            if stage == Stage::Eval && self.cfg.eval.generated.is_none() && self.cfg.eval.reference.is_none() {
                continue;
            }
            reports.push(self.run_stage(stage)?);
        }
        Ok(reports)
    }
}

/// Process exit status for a finished run: 3 when any stage logged an
/// error (rejections are expected and do not count), else 0.
pub fn exit_status(reports: &[StageReport]) -> i32 {
    if reports.iter().any(|r| r.errors > 0) {
        3
    } else {
        0
    }
}
