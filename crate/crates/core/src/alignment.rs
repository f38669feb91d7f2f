//! Order-preserving step-to-frame alignment.
//!
//! Each step gets exactly one frame. Frame indices strictly increase with the
//! step index, every frame lies inside its step's time window (the step
//! bounds widened by `epsilon` seconds on both sides), and the sum of
//! step-frame similarities is maximal. [`align`] solves this with a
//! prefix-maximum dynamic program in `O(steps * frames)`;
//! [`brute_force_align`] enumerates every admissible assignment and serves as
//! its test oracle.
//!
//! Tie rule (shared by both): among optimal assignments, take the one whose
//! last frame is earliest, then whose second-to-last frame is earliest, and
//! so on backwards. This is what a backtrace that always prefers the
//! earliest maximizing frame produces.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{similarity, EmbeddingError, EmbeddingStore, EntryId, SimilarityMatrix};
use crate::exec::Execution;
use crate::steps::StepList;

pub const DEFAULT_EPSILON_S: f64 = 15.0;
/// Enumeration limits for [`brute_force_align`].
pub const BRUTE_FORCE_MAX_STEPS: usize = 8;
pub const BRUTE_FORCE_MAX_FRAMES: usize = 60;

const NONE: usize = usize::MAX;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("no order-preserving assignment exists; first blocked step(s): {steps:?}")]
    Infeasible { steps: Vec<usize> },
    #[error("brute force limited to {BRUTE_FORCE_MAX_STEPS} steps and {BRUTE_FORCE_MAX_FRAMES} frames, got {steps}x{frames}")]
    SizeLimit { steps: usize, frames: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("frame timestamps must strictly increase (index {0})")]
    UnsortedFrames(usize),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Admissible time range for one step's frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentWindow {
    pub step_index: usize,
    pub lo_s: f64,
    pub hi_s: f64,
}

impl AlignmentWindow {
    pub fn contains(&self, t: f64) -> bool {
        self.lo_s <= t && t <= self.hi_s
    }

    /// `lo > hi` only happens for a step that starts after the video ends.
    pub fn is_empty(&self) -> bool {
        self.lo_s > self.hi_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAssignment {
    pub step_index: usize,
    /// Column of the similarity matrix (row of the frame store).
    pub frame: usize,
    pub timestamp: f64,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frame_id: Option<EntryId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub assignments: Vec<FrameAssignment>,
    pub total_score: f64,
}

impl Alignment {
    pub fn frames(&self) -> Vec<usize> {
        self.assignments.iter().map(|a| a.frame).collect()
    }

    fn from_frames(sim: &SimilarityMatrix, ts: &[f64], windows: &[AlignmentWindow], frames: &[usize]) -> Self {
        let mut total = 0.0f64;
        let assignments = frames
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let score = f64::from(sim.get(i, f));
                total += score;
                FrameAssignment { step_index: windows[i].step_index, frame: f, timestamp: ts[f], score, frame_id: None }
            })
            .collect();
        Alignment { assignments, total_score: total }
    }
}

/// `[max(0, start - eps), min(duration, end + eps)]` for every step.
pub fn expand_windows(steps: &StepList, epsilon_s: f64, duration_s: f64) -> Vec<AlignmentWindow> {
    assert!(epsilon_s >= 0.0, "epsilon must be non-negative");
    steps
        .steps
        .iter()
        .map(|s| AlignmentWindow {
            step_index: s.index,
            lo_s: (s.start_s - epsilon_s).max(0.0),
            hi_s: (s.end_s + epsilon_s).min(duration_s),
        })
        .collect()
}

fn check_inputs(sim: &SimilarityMatrix, ts: &[f64], windows: &[AlignmentWindow]) -> Result<(), AlignError> {
    if sim.n_rows() != windows.len() {
        return Err(AlignError::Shape(format!("{} similarity rows for {} windows", sim.n_rows(), windows.len())));
    }
    if sim.n_cols() != ts.len() {
        return Err(AlignError::Shape(format!("{} similarity columns for {} frames", sim.n_cols(), ts.len())));
    }
    if let Some(i) = (1..ts.len()).find(|&i| ts[i].partial_cmp(&ts[i - 1]) != Some(Ordering::Greater)) {
        return Err(AlignError::UnsortedFrames(i));
    }
    Ok(())
}

fn empty_windows(ts: &[f64], windows: &[AlignmentWindow]) -> Vec<usize> {
    windows
        .iter()
        .filter(|w| !ts.iter().any(|&t| w.contains(t)))
        .map(|w| w.step_index)
        .collect()
}

/// Maximum-score order-preserving assignment.
pub fn align(sim: &SimilarityMatrix, frame_timestamps: &[f64], windows: &[AlignmentWindow]) -> Result<Alignment, AlignError> {
    check_inputs(sim, frame_timestamps, windows)?;
    let (n, frames) = (windows.len(), frame_timestamps.len());
    if n == 0 {
        return Ok(Alignment { assignments: Vec::new(), total_score: 0.0 });
    }
    let blocked = empty_windows(frame_timestamps, windows);
    if !blocked.is_empty() {
        return Err(AlignError::Infeasible { steps: blocked });
    }

    // best[f]: best total for steps 0..=i with step i on frame f
    let mut best = vec![f64::NEG_INFINITY; frames];
    let mut back = vec![NONE; n * frames];
    for (f, slot) in best.iter_mut().enumerate() {
        if windows[0].contains(frame_timestamps[f]) {
            *slot = f64::from(sim.get(0, f));
        }
    }
    let mut next = vec![f64::NEG_INFINITY; frames];
    for i in 1..n {
        let row = sim.row(i);
        let (mut run_best, mut run_arg) = (f64::NEG_INFINITY, NONE);
        for f in 0..frames {
            next[f] = f64::NEG_INFINITY;
            if run_arg != NONE && windows[i].contains(frame_timestamps[f]) {
                next[f] = f64::from(row[f]) + run_best;
                back[i * frames + f] = run_arg;
            }
            // strict comparison keeps the earliest maximizer
            if best[f] > run_best {
                run_best = best[f];
                run_arg = f;
            }
        }
        if next.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(AlignError::Infeasible { steps: vec![windows[i].step_index] });
        }
        std::mem::swap(&mut best, &mut next);
    }

    let mut last = NONE;
    for (f, &v) in best.iter().enumerate() {
        if v > f64::NEG_INFINITY && (last == NONE || v > best[last]) {
            last = f;
        }
    }
    let mut picked = vec![0usize; n];
    picked[n - 1] = last;
    for i in (1..n).rev() {
        picked[i - 1] = back[i * frames + picked[i]];
    }
    Ok(Alignment::from_frames(sim, frame_timestamps, windows, &picked))
}

/// Exhaustive search over every admissible strictly increasing assignment.
pub fn brute_force_align(
    sim: &SimilarityMatrix,
    frame_timestamps: &[f64],
    windows: &[AlignmentWindow],
) -> Result<Alignment, AlignError> {
    check_inputs(sim, frame_timestamps, windows)?;
    let (n, frames) = (windows.len(), frame_timestamps.len());
    if n > BRUTE_FORCE_MAX_STEPS || frames > BRUTE_FORCE_MAX_FRAMES {
        return Err(AlignError::SizeLimit { steps: n, frames });
    }
    if n == 0 {
        return Ok(Alignment { assignments: Vec::new(), total_score: 0.0 });
    }
    let admissible: Vec<Vec<usize>> = windows
        .iter()
        .map(|w| (0..frames).filter(|&f| w.contains(frame_timestamps[f])).collect())
        .collect();

    struct Search<'a> {
        sim: &'a SimilarityMatrix,
        admissible: &'a [Vec<usize>],
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        fn visit(&mut self, step: usize, after: Option<usize>) {
            if step == self.admissible.len() {
                let total = self
                    .current
                    .iter()
                    .enumerate()
                    .fold(0.0f64, |acc, (i, &f)| acc + f64::from(self.sim.get(i, f)));
                let better = match &self.best {
                    None => true,
                    Some((b, frames)) => total > *b || (total == *b && reversed_less(&self.current, frames)),
                };
                if better {
                    self.best = Some((total, self.current.clone()));
                }
                return;
            }
            for k in 0..self.admissible[step].len() {
                let f = self.admissible[step][k];
                if after.is_some_and(|a| f <= a) {
                    continue;
                }
                self.current.push(f);
                self.visit(step + 1, Some(f));
                self.current.pop();
            }
        }
    }

    let mut search = Search { sim, admissible: &admissible, current: Vec::with_capacity(n), best: None };
    search.visit(0, None);
    match search.best {
        Some((_, picked)) => Ok(Alignment::from_frames(sim, frame_timestamps, windows, &picked)),
        None => Err(AlignError::Infeasible { steps: infeasible_steps_by_scan(frame_timestamps, windows) }),
    }
}

/// Compares two frame tuples starting from the last element.
fn reversed_less(a: &[usize], b: &[usize]) -> bool {
    a.iter().rev().lt(b.iter().rev())
}

/// First step that cannot be placed after a greedy earliest placement of the
/// steps before it.
fn infeasible_steps_by_scan(ts: &[f64], windows: &[AlignmentWindow]) -> Vec<usize> {
    let blocked = empty_windows(ts, windows);
    if !blocked.is_empty() {
        return blocked;
    }
    let mut after: Option<usize> = None;
    for w in windows {
        match (0..ts.len()).find(|&f| after.is_none_or(|a| f > a) && w.contains(ts[f])) {
            Some(f) => after = Some(f),
            None => return vec![w.step_index],
        }
    }
    Vec::new()
}

/// Windows, similarities and the DP for one video.
///
/// `text_store` holds one row per step, in step order; `frame_store` holds
/// the video's frames in time order. The video duration used for window
/// clamping is the last frame timestamp.
pub fn align_video(
    steps: &StepList,
    frame_store: &EmbeddingStore,
    text_store: &EmbeddingStore,
    epsilon_s: f64,
) -> Result<Alignment, AlignError> {
    if text_store.len() != steps.len() {
        return Err(AlignError::Shape(format!("{} text rows for {} steps", text_store.len(), steps.len())));
    }
    if !frame_store.kind().is_temporal() {
        return Err(AlignError::Shape("frame store must be keyed by timestamps".into()));
    }
    let timestamps = frame_store.timestamps();
    let duration = timestamps.last().copied().unwrap_or(0.0);
    let windows = expand_windows(steps, epsilon_s, duration);
    let sim = similarity(text_store, frame_store)?;
    let mut alignment = align(&sim, &timestamps, &windows)?;
    for a in &mut alignment.assignments {
        a.frame_id = Some(frame_store.ids()[a.frame].clone());
    }
    Ok(alignment)
}

/// One video's inputs for [`align_corpus`].
#[derive(Debug, Clone)]
pub struct AlignJob {
    pub steps: StepList,
    pub frames: EmbeddingStore,
    pub texts: EmbeddingStore,
}

/// Aligns every job independently; results come back in job order.
pub fn align_corpus(jobs: &[AlignJob], epsilon_s: f64, exec: Execution) -> Vec<Result<Alignment, AlignError>> {
    exec.map(jobs, |job| align_video(&job.steps, &job.frames, &job.texts, epsilon_s))
}
