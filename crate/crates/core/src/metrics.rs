//! Embedding-based scoring of generated instruction sequences.
//!
//! Three numbers per sequence, each macro-averaged over the corpus:
//!
//! * step faithfulness: generated image `i` is zero-shot classified among the
//!   sequence's prompts `τ_0..τ_n`; correct when it lands on `τ_i`;
//! * scene consistency: the nearest scene-feature neighbour of generated
//!   image `i` in a gallery of real frames comes from the sequence's own
//!   video (input images excluded);
//! * task faithfulness: the mean generated image embedding is classified
//!   among all task names; 1 when it picks the sequence's task.
//!
//! Cosines are computed on rows rescaled to unit length in `f64`, so every
//! decision (and therefore every metric) is unchanged when a store is
//! multiplied by a positive constant.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetManifest;
use crate::embeddings::{unit_vector, EmbeddingError, EmbeddingStore, EntryId, Gallery, StoreKind, UnitRows};
use crate::exec::Execution;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prompt {0:?} has no text embedding")]
    MissingPrompt(String),
    #[error("task {0:?} has no text embedding")]
    MissingTask(String),
    #[error("sequence {video_id}: {reason}")]
    Shape { video_id: String, reason: String },
    #[error("no sequences to evaluate")]
    EmptyCorpus,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// A generated sequence `Î_1..Î_n` with its prompts `τ_0..τ_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSequence {
    pub video_id: String,
    pub task_id: u32,
    /// Key of the task's row in the task-name store.
    pub task_name: String,
    /// `τ_0..τ_n`: text-store keys, one more than there are generated images.
    pub prompts: Vec<String>,
    /// Generated images in the image-text space, one row per step.
    pub gen_clip: EmbeddingStore,
    /// Generated images in the scene-feature space, one row per step.
    pub gen_scene: EmbeddingStore,
    pub input_image_id: EntryId,
}

impl GeneratedSequence {
    pub fn len(&self) -> usize {
        self.gen_clip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gen_clip.is_empty()
    }

    pub fn check(&self) -> Result<(), MetricsError> {
        let shape = |reason: String| MetricsError::Shape { video_id: self.video_id.clone(), reason };
        let n = self.gen_clip.len();
        if n == 0 {
            return Err(shape("no generated images".into()));
        }
        if self.gen_scene.len() != n {
            return Err(shape(format!("{n} image-text rows but {} scene rows", self.gen_scene.len())));
        }
        if self.prompts.len() != n + 1 {
            return Err(shape(format!("{} prompts for {n} generated images", self.prompts.len())));
        }
        Ok(())
    }
}

/// Which input images are hidden from the scene gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputExclusion {
    /// Every sequence's input image is removed for every query.
    #[default]
    AllInputs,
    /// Only the evaluated sequence's own input image is removed.
    OwnInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub exclusion: InputExclusion,
}

/// The embedding stores a corpus is scored against.
#[derive(Debug, Clone, Copy)]
pub struct EvalStores<'a> {
    /// Prompt texts, keyed by the prompt string.
    pub prompts: &'a EmbeddingStore,
    /// Task names, keyed by the name.
    pub tasks: &'a EmbeddingStore,
    /// Scene features of real test frames.
    pub scene_gallery: &'a EmbeddingStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub video_id: String,
    pub n_steps: usize,
    pub step_faithfulness: f64,
    pub scene_consistency: f64,
    pub task_faithfulness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_sequences: usize,
    pub step_faithfulness: f64,
    pub scene_consistency: f64,
    pub task_faithfulness: f64,
    /// Externally computed FID, carried only for display.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    pub per_sequence: Vec<SequenceScore>,
}

impl MetricReport {
    /// Unweighted means of the per-sequence values.
    pub fn from_scores(per_sequence: Vec<SequenceScore>) -> Self {
        let n = per_sequence.len();
        let mean = |f: fn(&SequenceScore) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_sequence.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            n_sequences: n,
            step_faithfulness: mean(|s| s.step_faithfulness),
            scene_consistency: mean(|s| s.scene_consistency),
            task_faithfulness: mean(|s| s.task_faithfulness),
            fid: None,
            per_sequence,
        }
    }

    /// Aligned plain-text table, one row per labelled report.
    pub fn table(rows: &[(&str, &MetricReport)]) -> String {
        let width = rows.iter().map(|(l, _)| l.chars().count()).chain([6]).max().unwrap_or(6);
        let with_fid = rows.iter().any(|(_, r)| r.fid.is_some());
        let mut out = format!("{:<width$}  Step Faithf.  Scene Consist.  Task Faithf.", "Method");
        if with_fid {
            out.push_str("     FID");
        }
        out.push('\n');
        for (label, r) in rows {
            let _ = write!(
                out,
                "{label:<width$}  {:>12.2}  {:>14.2}  {:>12.2}",
                r.step_faithfulness, r.scene_consistency, r.task_faithfulness
            );
            if with_fid {
                match r.fid {
                    Some(f) => {
                        let _ = write!(out, "  {f:>6.1}");
                    }
                    None => out.push_str("       -"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn unit_row(store: &EmbeddingStore, i: usize) -> Result<Vec<f64>, MetricsError> {
    unit_vector(store.row(i)).ok_or(MetricsError::Embedding(EmbeddingError::ZeroVector(i)))
}

/// Fraction of generated images classified to their own prompt among
/// `τ_0..τ_n`; ties go to the lower prompt index.
pub fn step_faithfulness(seq: &GeneratedSequence, prompts: &EmbeddingStore) -> Result<f64, MetricsError> {
    seq.check()?;
    let rows = seq
        .prompts
        .iter()
        .map(|p| prompts.row_of(&EntryId::text(p.as_str())).map_err(|_| MetricsError::MissingPrompt(p.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    if seq.gen_clip.dim() != prompts.dim() {
        return Err(EmbeddingError::DimMismatch { expected: prompts.dim(), found: seq.gen_clip.dim() }.into());
    }
    let classes = UnitRows::from_slices(prompts.dim(), rows.into_iter())?;
    let mut correct = 0usize;
    for i in 0..seq.len() {
        let q = unit_row(&seq.gen_clip, i)?;
        let (best, _) = classes.argmax(&q, 0..classes.len()).expect("at least two classes");
        if best == i + 1 {
            correct += 1;
        }
    }
    Ok(correct as f64 / seq.len() as f64)
}

/// Fraction of generated images whose nearest gallery frame belongs to the
/// sequence's own video.
pub fn scene_consistency(seq: &GeneratedSequence, gallery: &Gallery<'_>, exclude: &HashSet<EntryId>) -> Result<f64, MetricsError> {
    seq.check()?;
    let mut correct = 0usize;
    for i in 0..seq.len() {
        let (id, _) = gallery.nearest(seq.gen_scene.row(i), exclude)?;
        if id.video_id() == Some(seq.video_id.as_str()) {
            correct += 1;
        }
    }
    Ok(correct as f64 / seq.len() as f64)
}

/// Task names in canonical order, ready for classification.
#[derive(Debug, Clone)]
pub struct TaskClassifier {
    names: Vec<EntryId>,
    unit: UnitRows,
}

impl TaskClassifier {
    pub fn new(tasks: &EmbeddingStore) -> Result<Self, MetricsError> {
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        order.sort_by(|&a, &b| tasks.ids()[a].cmp(&tasks.ids()[b]));
        let unit = UnitRows::from_slices(tasks.dim(), order.iter().map(|&i| tasks.row(i)))?;
        let names = order.iter().map(|&i| tasks.ids()[i].clone()).collect();
        Ok(Self { names, unit })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// 1.0 when the renormalized mean of the image-text rows is closest to the
    /// sequence's task name, else 0.0.
    pub fn score(&self, seq: &GeneratedSequence) -> Result<f64, MetricsError> {
        seq.check()?;
        let truth = EntryId::text(seq.task_name.as_str());
        if self.names.binary_search(&truth).is_err() {
            return Err(MetricsError::MissingTask(seq.task_name.clone()));
        }
        if seq.gen_clip.dim() != self.unit.dim() {
            return Err(EmbeddingError::DimMismatch { expected: self.unit.dim(), found: seq.gen_clip.dim() }.into());
        }
        let mut mean = vec![0.0f64; self.unit.dim()];
        for i in 0..seq.len() {
            for (m, x) in mean.iter_mut().zip(unit_row(&seq.gen_clip, i)?) {
                *m += x;
            }
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        mean.iter_mut().for_each(|x| *x /= norm);
        let (best, _) = self.unit.argmax(&mean, 0..self.unit.len()).expect("task store is non-empty");
        Ok(if self.names[best] == truth { 1.0 } else { 0.0 })
    }
}

pub fn task_faithfulness(seq: &GeneratedSequence, tasks: &EmbeddingStore) -> Result<f64, MetricsError> {
    TaskClassifier::new(tasks)?.score(seq)
}

/// Scores every sequence, then macro-averages.
pub fn evaluate(
    corpus: &[GeneratedSequence],
    stores: EvalStores<'_>,
    cfg: &MetricsConfig,
    exec: Execution,
) -> Result<MetricReport, MetricsError> {
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let gallery = Gallery::new(stores.scene_gallery)?;
    let tasks = TaskClassifier::new(stores.tasks)?;
    let all_inputs: HashSet<EntryId> = corpus.iter().map(|s| s.input_image_id.clone()).collect();
    let scores = exec.map(corpus, |seq| -> Result<SequenceScore, MetricsError> {
        let own;
        let exclude = match cfg.exclusion {
            InputExclusion::AllInputs => &all_inputs,
            InputExclusion::OwnInput => {
                own = HashSet::from([seq.input_image_id.clone()]);
                &own
            }
        };
        Ok(SequenceScore {
            video_id: seq.video_id.clone(),
            n_steps: seq.len(),
            step_faithfulness: step_faithfulness(seq, stores.prompts)?,
            scene_consistency: scene_consistency(seq, &gallery, exclude)?,
            task_faithfulness: tasks.score(seq)?,
        })
    });
    Ok(MetricReport::from_scores(scores.into_iter().collect::<Result<_, _>>()?))
}

/// Expected metrics of uniformly random generations over a manifest whose
/// records hold the input image in item 0 and the targets in items `1..`.
///
/// Step: `1/(n+1)` per sequence. Task: `1/n_tasks`. Scene: a random query
/// lands on any of the `N` gallery frames with equal chance, so a sequence
/// contributing `n_v` frames scores `n_v / N`. Records with a single item
/// have nothing to generate and are skipped.
pub fn random_baseline(manifest: &DatasetManifest, n_tasks: usize) -> Result<MetricReport, MetricsError> {
    assert!(n_tasks > 0, "need at least one task");
    let usable: Vec<_> = manifest.records.iter().filter(|r| r.items.len() >= 2).collect();
    if usable.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let gallery_size: usize = usable.iter().map(|r| r.items.len() - 1).sum();
    let scores = usable
        .iter()
        .map(|r| {
            let n = r.items.len() - 1;
            SequenceScore {
                video_id: r.video_id.clone(),
                n_steps: n,
                step_faithfulness: 1.0 / (n + 1) as f64,
                scene_consistency: n as f64 / gallery_size as f64,
                task_faithfulness: 1.0 / n_tasks as f64,
            }
        })
        .collect();
    Ok(MetricReport::from_scores(scores))
}

/// How [`reference_sequences`] fills the generated slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// The real frames `I_1..I_n`.
    Source,
    /// The input frame `I_0` repeated `n` times.
    Copy,
}

/// Builds generations from a manifest's own frames.
///
/// `clip_frames` and `scene_frames` hold frame embeddings keyed by
/// `(video_id, timestamp)`. Generated rows get ids `(video_id, i)` for step
/// `i`. Records with a single item are skipped.
pub fn reference_sequences(
    manifest: &DatasetManifest,
    clip_frames: &EmbeddingStore,
    scene_frames: &EmbeddingStore,
    kind: Reference,
) -> Result<Vec<GeneratedSequence>, MetricsError> {
    let mut out = Vec::new();
    for r in manifest.records.iter().filter(|r| r.items.len() >= 2) {
        let n = r.items.len() - 1;
        let frame_ids: Vec<EntryId> = r.items.iter().map(|it| EntryId::frame(r.video_id.as_str(), it.frame_timestamp)).collect();
        let pick = |store: &EmbeddingStore, kind_out: StoreKind| -> Result<EmbeddingStore, MetricsError> {
            let rows = (1..=n)
                .map(|i| {
                    let src = match kind {
                        Reference::Source => &frame_ids[i],
                        Reference::Copy => &frame_ids[0],
                    };
                    store.row_of(src).map(<[f32]>::to_vec)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let ids = (1..=n).map(|i| EntryId::frame(r.video_id.as_str(), i as f64)).collect();
            Ok(EmbeddingStore::from_rows(kind_out, ids, rows)?)
        };
        out.push(GeneratedSequence {
            video_id: r.video_id.clone(),
            task_id: r.task_id,
            task_name: r.task_name.clone(),
            prompts: r.items.iter().map(|it| it.instruction.clone()).collect(),
            gen_clip: pick(clip_frames, StoreKind::Frame)?,
            gen_scene: pick(scene_frames, StoreKind::Scene)?,
            input_image_id: frame_ids[0].clone(),
        });
    }
    Ok(out)
}
