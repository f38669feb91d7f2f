use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::alignment::DEFAULT_EPSILON_S;
use crate::dataset::DEFAULT_K_MAX;
use crate::filtering::FilterConfig;
use crate::llm::GatewayConfig;
use crate::metrics::{InputExclusion, Reference};
use crate::steps::ExtractConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of `.srt`, `.vtt` and `.json` transcripts; the file stem is the video id.
    pub transcripts: PathBuf,
    /// Directory holding `<video_id>.frames.shte` stores and `steps.shte`,
    /// the text store keyed by instruction text.
    pub embeddings: PathBuf,
    /// JSON lines of `{video_id, title, task_id, task_name, category}`.
    pub videos: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            transcripts: "transcripts".into(),
            embeddings: "embeddings".into(),
            videos: "videos.jsonl".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_test_tasks: usize,
    pub per_task_quota: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { n_test_tasks: 200, per_task_quota: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub k_max: usize,
    pub n_batches: usize,
    pub batch_size: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { k_max: DEFAULT_K_MAX, n_batches: 4, batch_size: 8 }
    }
}

/// Where the `eval` stage gets its generations and stores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// JSON lines describing generated sequences; unused for reference runs.
    pub generated: Option<PathBuf>,
    /// Score the test split's own frames (`source`) or its repeated input
    /// frame (`copy`) instead of `generated`.
    pub reference: Option<Reference>,
    /// Prompt texts keyed by instruction.
    pub prompts: PathBuf,
    /// Task names keyed by name.
    pub tasks: PathBuf,
    /// Scene features of test frames, keyed by `(video_id, timestamp)`.
    pub scene_gallery: PathBuf,
    /// Image-text features of test frames; needed for reference runs.
    pub clip_frames: Option<PathBuf>,
    pub exclusion: InputExclusion,
    /// Also emit the analytic random row.
    pub random_row: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            generated: None,
            reference: None,
            prompts: "eval/prompts.shte".into(),
            tasks: "eval/tasks.shte".into(),
            scene_gallery: "eval/scene.shte".into(),
            clip_frames: None,
            exclusion: InputExclusion::AllInputs,
            random_row: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub epsilon_s: f64,
    /// Frames per second kept from each frame store before alignment.
    pub frame_rate_hz: f64,
    pub seed: u64,
    pub workers: usize,
    /// Scripted responses (`{"responses": {sha256: text}}`) instead of the HTTP service.
    pub mock_responses: Option<PathBuf>,
    pub gateway: GatewayConfig,
    pub filter: FilterConfig,
    pub extract: ExtractConfig,
    pub split: SplitConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            epsilon_s: DEFAULT_EPSILON_S,
            frame_rate_hz: 1.0,
            seed: 0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            mock_responses: None,
            gateway: GatewayConfig::default(),
            filter: FilterConfig::default(),
            extract: ExtractConfig::default(),
            split: SplitConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML file; relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::input(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| PipelineError::input(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.transcripts);
        fix(&mut self.paths.embeddings);
        fix(&mut self.paths.videos);
        fix(&mut self.paths.output);
        if let Some(p) = &mut self.mock_responses {
            fix(p);
        }
        if let Some(p) = &mut self.eval.generated {
            fix(p);
        }
        if let Some(p) = &mut self.eval.clip_frames {
            fix(p);
        }
        fix(&mut self.eval.prompts);
        fix(&mut self.eval.tasks);
        fix(&mut self.eval.scene_gallery);
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.epsilon_s >= 0.0 && self.epsilon_s.is_finite()) {
            return bad(format!("epsilon_s must be a non-negative number, got {}", self.epsilon_s));
        }
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz.is_finite()) {
            return bad(format!("frame_rate_hz must be positive, got {}", self.frame_rate_hz));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.sample.k_max < 2 {
            return bad("sample.k_max must be at least 2".into());
        }
        Ok(())
    }
}
