//! Image-text sequence records, corpus statistics, train/test splits and the
//! training-window sampler.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::Alignment;
use crate::steps::StepList;

/// Default upper bound for per-batch training lengths.
pub const DEFAULT_K_MAX: usize = 8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{steps} steps but {assignments} aligned frames")]
    LengthMismatch { steps: usize, assignments: usize },
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("{requested} test tasks requested but only {available} distinct tasks exist")]
    InsufficientTasks { requested: usize, available: usize },
    #[error("record {video_id}: {reason}")]
    InvalidRecord { video_id: String, reason: String },
    #[error("video {0} appears more than once")]
    DuplicateVideo(String),
    #[error("manifest line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceItem {
    pub instruction: String,
    pub frame_timestamp: f64,
    pub alignment_score: f64,
}

/// One ordered image-text sequence: frame `i` illustrates instruction `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub video_id: String,
    pub task_id: u32,
    pub task_name: String,
    pub category: String,
    pub items: Vec<SequenceItem>,
}

impl SequenceRecord {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |reason: String| DatasetError::InvalidRecord { video_id: self.video_id.clone(), reason };
        if self.items.is_empty() {
            return Err(bad("no items".into()));
        }
        for (i, it) in self.items.iter().enumerate() {
            if !it.frame_timestamp.is_finite() || !it.alignment_score.is_finite() {
                return Err(bad(format!("item {i} has a non-finite value")));
            }
            if i > 0 && it.frame_timestamp <= self.items[i - 1].frame_timestamp {
                return Err(bad(format!("frame timestamps not increasing at item {i}")));
            }
        }
        Ok(())
    }

    pub fn mean_score(&self) -> f64 {
        self.items.iter().map(|i| i.alignment_score).sum::<f64>() / self.items.len() as f64
    }
}

/// Task metadata attached to a video when its sequence is assembled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub task_id: u32,
    pub task_name: String,
    pub category: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    #[default]
    All,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<SequenceRecord>,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    split: Split,
}

impl DatasetManifest {
    /// Validates every record and rejects duplicate video ids.
    pub fn new(records: Vec<SequenceRecord>, split: Split) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for r in &records {
            r.validate()?;
            if !seen.insert(r.video_id.as_str()) {
                return Err(DatasetError::DuplicateVideo(r.video_id.clone()));
            }
        }
        Ok(Self { records, split })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Line-delimited JSON: a `{"split": ...}` header, then one record per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        let header = serde_json::to_string(&ManifestHeader { split: self.split }).expect("header serializes");
        writeln!(w, "{header}")?;
        for r in &self.records {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Reads [`write_jsonl`](Self::write_jsonl) output. The header line is
    /// optional (split defaults to `ALL`); blank lines are skipped.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, DatasetError> {
        let mut split = Split::All;
        let mut records = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if n == 0 {
                if let Ok(h) = serde_json::from_str::<ManifestHeader>(line) {
                    split = h.split;
                    continue;
                }
            }
            records.push(serde_json::from_str(line).map_err(|source| DatasetError::Json { line: n + 1, source })?);
        }
        Self::new(records, split)
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }
}

/// Zips each step's instruction with its aligned frame.
pub fn assemble_sequence(steps: &StepList, alignment: &Alignment, meta: &VideoMeta) -> Result<SequenceRecord, DatasetError> {
    if steps.len() != alignment.assignments.len() {
        return Err(DatasetError::LengthMismatch { steps: steps.len(), assignments: alignment.assignments.len() });
    }
    let items = steps
        .steps
        .iter()
        .zip(&alignment.assignments)
        .map(|(s, a)| SequenceItem {
            instruction: s.instruction.clone(),
            frame_timestamp: a.timestamp,
            alignment_score: a.score,
        })
        .collect();
    let record = SequenceRecord {
        video_id: steps.video_id.clone(),
        task_id: meta.task_id,
        task_name: meta.task_name.clone(),
        category: meta.category.clone(),
        items,
    };
    record.validate()?;
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics (divisor `n`).
    pub fn of(values: impl IntoIterator<Item = f64> + Clone) -> Self {
        let (n, sum) = values.clone().into_iter().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = sum / n as f64;
        let var = values.into_iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_sequences: usize,
    pub steps_per_seq: MeanStd,
    /// Pooled over every step of every sequence.
    pub words_per_step: MeanStd,
    /// Sequence length -> number of sequences.
    pub length_histogram: BTreeMap<usize, usize>,
    /// Percentage (0-100) of sequences with 2 to 16 steps.
    pub pct_len_2_to_16: f64,
    pub category_distribution: BTreeMap<String, usize>,
}

impl CorpusStats {
    /// `length<TAB>count` rows for plotting.
    pub fn histogram_table(&self) -> String {
        let mut out = String::from("length\tcount\n");
        for (len, count) in &self.length_histogram {
            out.push_str(&format!("{len}\t{count}\n"));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "{} sequences, {:.1} (± {:.1}) steps per sequence, {:.1} (± {:.1}) words per step, {:.1}% with 2-16 steps",
            self.n_sequences,
            self.steps_per_seq.mean,
            self.steps_per_seq.std,
            self.words_per_step.mean,
            self.words_per_step.std,
            self.pct_len_2_to_16
        )
    }
}

pub fn compute_stats(m: &DatasetManifest) -> Result<CorpusStats, DatasetError> {
    if m.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    // sort first so the float sums do not depend on record order
    let mut lengths: Vec<usize> = m.records.iter().map(|r| r.items.len()).collect();
    lengths.sort_unstable();
    let mut words: Vec<usize> = m
        .records
        .iter()
        .flat_map(|r| r.items.iter().map(|i| i.instruction.split_whitespace().count()))
        .collect();
    words.sort_unstable();

    let mut length_histogram = BTreeMap::new();
    for &l in &lengths {
        *length_histogram.entry(l).or_insert(0) += 1;
    }
    let mut category_distribution = BTreeMap::new();
    for r in &m.records {
        *category_distribution.entry(r.category.clone()).or_insert(0) += 1;
    }
    let in_range = lengths.iter().filter(|&&l| (2..=16).contains(&l)).count();
    Ok(CorpusStats {
        n_sequences: m.len(),
        steps_per_seq: MeanStd::of(lengths.iter().map(|&l| l as f64)),
        words_per_step: MeanStd::of(words.iter().map(|&w| w as f64)),
        length_histogram,
        pct_len_2_to_16: 100.0 * in_range as f64 / m.len() as f64,
        category_distribution,
    })
}

/// Picks `n_test_tasks` tasks spread over categories in proportion to how
/// many tasks each category has, then keeps the `per_task_quota`
/// best-aligned sequences of each picked task as the test set. Everything
/// else is training data.
///
/// Category shares use largest-remainder rounding (ties by category name);
/// tasks inside a category are drawn by a seeded shuffle; sequences inside a
/// task are ranked by mean alignment score, then video id.
pub fn split_dataset(
    m: &DatasetManifest,
    n_test_tasks: usize,
    per_task_quota: usize,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DatasetError> {
    let mut tasks_by_category: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for r in &m.records {
        tasks_by_category.entry(&r.category).or_default().insert(r.task_id);
    }
    let available: usize = tasks_by_category.values().map(BTreeSet::len).sum();
    if available < n_test_tasks {
        return Err(DatasetError::InsufficientTasks { requested: n_test_tasks, available });
    }

    let mut shares: Vec<(&str, usize, f64)> = tasks_by_category
        .iter()
        .map(|(c, t)| {
            let exact = n_test_tasks as f64 * t.len() as f64 / available as f64;
            (*c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut left = n_test_tasks - shares.iter().map(|s| s.1).sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| shares[b].2.total_cmp(&shares[a].2).then(shares[a].0.cmp(shares[b].0)));
    for i in order {
        if left == 0 {
            break;
        }
        if shares[i].1 < tasks_by_category[shares[i].0].len() {
            shares[i].1 += 1;
            left -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_tasks = HashSet::new();
    for (category, take, _) in &shares {
        let mut tasks: Vec<u32> = tasks_by_category[category].iter().copied().collect();
        tasks.shuffle(&mut rng);
        test_tasks.extend(tasks.into_iter().take(*take));
    }

    let mut by_task: BTreeMap<u32, Vec<&SequenceRecord>> = BTreeMap::new();
    for r in m.records.iter().filter(|r| test_tasks.contains(&r.task_id)) {
        by_task.entry(r.task_id).or_default().push(r);
    }
    let mut test_ids = HashSet::new();
    for records in by_task.values_mut() {
        records.sort_by(|a, b| b.mean_score().total_cmp(&a.mean_score()).then_with(|| a.video_id.cmp(&b.video_id)));
        test_ids.extend(records.iter().take(per_task_quota).map(|r| r.video_id.clone()));
    }

    let (mut test, mut train): (Vec<_>, Vec<_>) = m.records.iter().cloned().partition(|r| test_ids.contains(&r.video_id));
    test.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    train.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok((
        DatasetManifest { records: train, split: Split::Train },
        DatasetManifest { records: test, split: Split::Test },
    ))
}

/// Uniform start index of a length-`k` window over `len` items; 0 when the
/// whole sequence fits.
pub fn sample_window_start<R: Rng + ?Sized>(len: usize, k: usize, rng: &mut R) -> usize {
    assert!(k >= 1, "window length must be at least 1");
    if len <= k {
        0
    } else {
        rng.random_range(0..=len - k)
    }
}

/// `k` consecutive items starting at a uniformly drawn index; sequences of
/// at most `k` items come back whole.
pub fn sample_training_window<R: Rng + ?Sized>(r: &SequenceRecord, k: usize, rng: &mut R) -> SequenceRecord {
    let start = sample_window_start(r.items.len(), k, rng);
    let end = (start + k).min(r.items.len());
    SequenceRecord { items: r.items[start..end].to_vec(), ..r.clone() }
}

/// One sequence length per batch, uniform over `2..=k_max`.
pub fn batch_length_schedule<R: Rng + ?Sized>(k_max: usize, n_batches: usize, rng: &mut R) -> Vec<usize> {
    assert!(k_max >= 2, "k_max must be at least 2");
    (0..n_batches).map(|_| rng.random_range(2..=k_max)).collect()
}
