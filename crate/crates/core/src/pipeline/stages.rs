use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cache::{self, EntryKind, ErrorLedger, Stamp};
use super::{PipelineConfig, PipelineError, Stage, StageReport};
use crate::alignment::{align_video, AlignError, Alignment, FrameAssignment};
use crate::dataset::{
    assemble_sequence, batch_length_schedule, compute_stats, sample_window_start, split_dataset, DatasetManifest, Split,
    VideoMeta,
};
use crate::embeddings::{load_store, EmbeddingStore, EntryId, StoreKind};
use crate::exec::Execution;
use crate::filtering::{classify_video, FilterError, FilterVerdict, FILTER_PROMPT_VERSION};
use crate::llm::Gateway;
use crate::metrics::{evaluate, random_baseline, reference_sequences, EvalStores, GeneratedSequence, MetricReport, MetricsConfig, Reference};
use crate::steps::{extract_steps, StepError, StepList, STEP_PROMPT_VERSION};
use crate::transcript::{parse_transcript, serialize_transcript, Transcript, TranscriptFormat};

const SUMMARY_FILE: &str = "summary.json";
const STEP_TEXTS_FILE: &str = "steps.shte";
const FRAMES_SUFFIX: &str = ".frames.shte";

pub(super) struct Context<'a> {
    pub cfg: &'a PipelineConfig,
    pub exec: Execution,
    pub gateway: Option<&'a dyn Gateway>,
}

impl Context<'_> {
    fn dir(&self, stage: Stage) -> PathBuf {
        self.cfg.paths.output.join(stage.name())
    }

    /// Output directory of an earlier stage, which must already exist.
    fn upstream(&self, stage: Stage) -> Result<PathBuf, PipelineError> {
        let dir = self.dir(stage);
        if !dir.is_dir() {
            return Err(PipelineError::input(&dir, format!("missing; run `{stage}` first")));
        }
        Ok(dir)
    }

    fn gateway(&self) -> &dyn Gateway {
        self.gateway.expect("gateway resolved before LLM stages")
    }
}

/// One line of the videos file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRow {
    pub video_id: String,
    #[serde(default)]
    pub title: String,
    pub task_id: u32,
    pub task_name: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedStep {
    pub index: usize,
    pub frame_timestamp: f64,
    pub score: f64,
}

/// One line of `align/alignments.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub video_id: String,
    pub steps: Vec<AlignedStep>,
    pub total_score: f64,
}

impl AlignmentRecord {
    pub fn new(video_id: &str, a: &Alignment) -> Self {
        Self {
            video_id: video_id.into(),
            steps: a
                .assignments
                .iter()
                .map(|x| AlignedStep { index: x.step_index, frame_timestamp: x.timestamp, score: x.score })
                .collect(),
            total_score: a.total_score,
        }
    }

    /// Frame columns are not persisted; assignments are numbered by position.
    pub fn to_alignment(&self) -> Alignment {
        Alignment {
            assignments: self
                .steps
                .iter()
                .enumerate()
                .map(|(i, s)| FrameAssignment {
                    step_index: s.index,
                    frame: i,
                    timestamp: s.frame_timestamp,
                    score: s.score,
                    frame_id: None,
                })
                .collect(),
            total_score: self.total_score,
        }
    }
}

/// One line of `sample/windows.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledWindow {
    pub batch: usize,
    pub k: usize,
    pub video_id: String,
    pub start: usize,
    pub instructions: Vec<String>,
}

/// One line of the generated-sequence list scored by `eval`; store paths
/// are relative to that file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRow {
    pub video_id: String,
    pub task_id: u32,
    pub task_name: String,
    pub prompts: Vec<String>,
    pub input_image: EntryId,
    pub gen_clip: PathBuf,
    pub gen_scene: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Summary {
    produced: usize,
}

#[derive(Serialize)]
struct EvalRow<'a> {
    method: &'a str,
    report: &'a MetricReport,
}

type StageOutput = (usize, ErrorLedger);

pub(super) fn run(ctx: &Context<'_>, stage: Stage) -> Result<StageReport, PipelineError> {
    let dir = ctx.dir(stage);
    let stamp = match stage {
        Stage::Parse => stamp_parse(ctx)?,
        Stage::Filter => stamp_filter(ctx)?,
        Stage::Extract => stamp_extract(ctx)?,
        Stage::Align => stamp_align(ctx)?,
        Stage::Assemble => stamp_assemble(ctx)?,
        Stage::Stats => stamp_stats(ctx)?,
        Stage::Split => stamp_split(ctx)?,
        Stage::Sample => stamp_sample(ctx)?,
        Stage::Eval => stamp_eval(ctx)?,
    };
    if cache::is_fresh(&dir, &stamp) {
        let ledger = ErrorLedger::read(&dir);
        let produced = cache::read_json::<Summary>(&dir.join(SUMMARY_FILE)).map_or(0, |s| s.produced);
        return Ok(report(stage, true, produced, &ledger));
    }

    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    let (produced, mut ledger) = match stage {
        Stage::Parse => parse(ctx, &dir)?,
        Stage::Filter => filter(ctx, &dir)?,
        Stage::Extract => extract(ctx, &dir)?,
        Stage::Align => align(ctx, &dir)?,
        Stage::Assemble => assemble(ctx, &dir)?,
        Stage::Stats => stats(ctx, &dir)?,
        Stage::Split => split(ctx, &dir)?,
        Stage::Sample => sample(ctx, &dir)?,
        Stage::Eval => eval(ctx, &dir)?,
    };
    ledger.write(&dir)?;
    cache::write_json(&dir.join(SUMMARY_FILE), &Summary { produced })?;
    cache::write_stamp(&dir, &stamp)?;
    Ok(report(stage, false, produced, &ledger))
}

fn report(stage: Stage, skipped: bool, produced: usize, ledger: &ErrorLedger) -> StageReport {
    StageReport {
        stage,
        skipped,
        produced,
        rejected: ledger.count(EntryKind::Rejected),
        errors: ledger.count(EntryKind::Error),
    }
}

/// Files in `dir` accepted by `keep`, sorted by name.
fn list_files(dir: &Path, keep: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>, PipelineError> {
    let entries = fs::read_dir(dir).map_err(|e| PipelineError::input(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if path.is_file() && !name.starts_with('.') && keep(name) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn transcript_inputs(ctx: &Context<'_>) -> Result<Vec<(PathBuf, TranscriptFormat)>, PipelineError> {
    let files = list_files(&ctx.cfg.paths.transcripts, |name| {
        Path::new(name).extension().and_then(|e| e.to_str()).and_then(TranscriptFormat::from_extension).is_some()
    })?;
    Ok(files
        .into_iter()
        .filter_map(|p| {
            let ext = p.extension()?.to_str()?.to_string();
            Some((p, TranscriptFormat::from_extension(&ext)?))
        })
        .collect())
}

fn read_videos(path: &Path) -> Result<BTreeMap<String, VideoRow>, PipelineError> {
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let rows: Vec<VideoRow> = cache::read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for row in rows {
        if out.contains_key(&row.video_id) {
            return Err(PipelineError::input(path, format!("video {} listed twice", row.video_id)));
        }
        out.insert(row.video_id.clone(), row);
    }
    Ok(out)
}

fn parsed_files(ctx: &Context<'_>) -> Result<Vec<PathBuf>, PipelineError> {
    list_files(&ctx.upstream(Stage::Parse)?, |n| n.ends_with(".json") && n != SUMMARY_FILE)
}

fn step_files(ctx: &Context<'_>) -> Result<Vec<PathBuf>, PipelineError> {
    list_files(&ctx.upstream(Stage::Extract)?, |n| n.ends_with(".json") && n != SUMMARY_FILE)
}

fn read_transcript(path: &Path) -> Result<Transcript, PipelineError> {
    let raw = fs::read(path).map_err(|e| PipelineError::input(path, e))?;
    parse_transcript(&raw, TranscriptFormat::SentenceJson, &stem(path)).map_err(|e| PipelineError::input(path, e))
}

fn mock_file<'a>(ctx: &Context<'a>) -> Option<&'a PathBuf> {
    ctx.cfg.mock_responses.as_ref()
}

// parse

fn stamp_parse(ctx: &Context<'_>) -> Result<String, PipelineError> {
    let inputs = transcript_inputs(ctx)?;
    let mut s = Stamp::new("parse");
    s.param("format", &"sentence-json-v1");
    s.files(inputs.iter().map(|(p, _)| p))?.file(&ctx.cfg.paths.videos)?;
    Ok(s.finish())
}

fn parse(ctx: &Context<'_>, dir: &Path) -> Result<StageOutput, PipelineError> {
    let videos = read_videos(&ctx.cfg.paths.videos)?;
    let inputs = transcript_inputs(ctx)?;
    let mut ledger = ErrorLedger::default();

    let mut seen: HashMap<String, &Path> = HashMap::new();
    let mut jobs = Vec::new();
    for (path, format) in &inputs {
        let id = stem(path);
        if let Some(first) = seen.get(&id) {
            ledger.push(&id, EntryKind::Error, format!("{} duplicates {}", path.display(), first.display()));
            continue;
        }
        seen.insert(id.clone(), path);
        jobs.push((id, path, *format));
    }

    let results = ctx.exec.map(&jobs, |(id, path, format)| -> Result<Vec<u8>, String> {
        let raw = fs::read(path).map_err(|e| e.to_string())?;
        let mut t = parse_transcript(&raw, *format, id).map_err(|e| e.to_string())?;
        if t.title.is_empty() {
            if let Some(v) = videos.get(id) {
                t = t.with_title(v.title.clone());
            }
        }
        Ok(serialize_transcript(&t, TranscriptFormat::SentenceJson))
    });
    let mut produced = 0;
    for ((id, _, _), result) in jobs.iter().zip(results) {
        match result {
            Ok(bytes) => {
                cache::write_atomic(&dir.join(format!("{id}.json")), &bytes)?;
                produced += 1;
            }
            Err(e) => ledger.push(id, EntryKind::Error, e),
        }
    }
    Ok((produced, ledger))
}

// filter

fn stamp_filter(ctx: &Context<'_>) -> Result<String, PipelineError> {
    let mut s = Stamp::new("filter");
    s.param("prompt", &FILTER_PROMPT_VERSION)
        .param("filter", &ctx.cfg.filter)
        .param("gateway", &ctx.cfg.gateway);
    s.files(&parsed_files(ctx)?)?.files(mock_file(ctx))?;
    Ok(s.finish())
}

fn filter(ctx: &Context<'_>, dir: &Path) -> Result<StageOutput, PipelineError> {
    let files = parsed_files(ctx)?;
    let results = ctx.exec.map(&files, |path| -> Result<FilterVerdict, String> {
        let t = read_transcript(path).map_err(|e| e.to_string())?;
        classify_video(&t, ctx.gateway(), &ctx.cfg.gateway, &ctx.cfg.filter).map_err(|e: FilterError| e.to_string())
    });
    let mut ledger = ErrorLedger::default();
    let mut verdicts = Vec::new();
    for (path, r) in files.iter().zip(results) {
        match r {
            Ok(v) => verdicts.push(v),
            Err(e) => ledger.push(&stem(path), EntryKind::Error, e),
        }
    }
    cache::write_jsonl(&dir.join("verdicts.jsonl"), &verdicts)?;
    Ok((verdicts.len(), ledger))
}

// extract

fn instructional_ids(ctx: &Context<'_>) -> Result<Vec<String>, PipelineError> {
    let path = ctx.upstream(Stage::Filter)?.join("verdicts.jsonl");
    let verdicts: Vec<FilterVerdict> = cache::read_jsonl(&path)?;
    Ok(verdicts.into_iter().filter(|v| v.is_instructional).map(|v| v.video_id).collect())
}

fn stamp_extract(ctx: &Context<'_>) -> Result<String, PipelineError> {
    let parse_dir = ctx.upstream(Stage::Parse)?;
    let ids = instructional_ids(ctx)?;
    let mut s = Stamp::new("extract");
    s.param("prompt", &STEP_PROMPT_VERSION)
        .param("extract", &ctx.cfg.extract)
        .param("gateway", &ctx.cfg.gateway)
        .param("videos", &ids);
    s.files(&ids.iter().map(|id| parse_dir.join(format!("{id}.json"))).collect::<Vec<_>>())?
        .files(mock_file(ctx))?;
    Ok(s.finish())
}

fn extract(ctx: &Context<'_>, dir: &Path) -> Result<StageOutput, PipelineError> {
    let parse_dir = ctx.upstream(Stage::Parse)?;
    let ids = instructional_ids(ctx)?;
    let results = ctx.exec.map(&ids, |id| -> Result<StepList, (EntryKind, String)> {
        let t = read_transcript(&parse_dir.join(format!("{id}.json"))).map_err(|e| (EntryKind::Error, e.to_string()))?;
        extract_steps(&t, ctx.gateway(), &ctx.cfg.gateway, &ctx.cfg.extract).map_err(|e| {
            let kind = match e {
                StepError::Gateway(_) => EntryKind::Error,
                _ => EntryKind::Rejected,
            };
            (kind, e.to_string())
        })
    });
    let mut ledger = ErrorLedger::default();
    let mut produced = 0;
    for (id, r) in ids.iter().zip(results) {
        match r {
            Ok(steps) => {
                cache::write_json(&dir.join(format!("{id}.json")), &steps)?;
                produced += 1;
            }
            Err((kind, e)) => ledger.push(id, kind, e),
        }
    }
    Ok((produced, ledger))
}

// align

fn frames_path(ctx: &Context<'_>, video_id: &str) -> PathBuf {
    ctx.cfg.paths.embeddings.join(format!("{video_id}{FRAMES_SUFFIX}"))
}

fn stamp_align(ctx: &Context<'_>) -> Result<String, PipelineError> {
    let files = step_files(ctx)?;
    let mut s = Stamp::new("align");
    s.param("epsilon_s", &ctx.cfg.epsilon_s).param("frame_rate_hz", &ctx.cfg.frame_rate_hz);
    s.files(&files)?;
    s.files(&files.iter().map(|p| frames_path(ctx, &stem(p))).collect::<Vec<_>>())?;
    s.file(&ctx.cfg.paths.embeddings.join(STEP_TEXTS_FILE))?;
    Ok(s.finish())
}

/// Keeps the first frame at or after every `1 / rate_hz` seconds.
pub(crate) fn decimate(store: &EmbeddingStore, rate_hz: f64) -> Result<EmbeddingStore, PipelineError> {
    let period = 1.0 / rate_hz;
    let mut next = f64::NEG_INFINITY;
    let mut keep = Vec::new();
    for id in store.ids() {
        let t = id.timestamp().unwrap_or(0.0);
        if t >= next - 1e-9 {
            keep.push(id.clone());
            next = t + period;
        }
    }
    if keep.len() == store.len() {
        return Ok(store.clone());
    }
    store.select(&keep).map_err(|e| PipelineError::stage(Stage::Align, e))
}

fn align_one(ctx: &Context<'_>, path: &Path, texts: &EmbeddingStore) -> Result<Alignment, (EntryKind, String)> {
    let err = |e: String| (EntryKind::Error, e);
    let steps: StepList = cache::read_json(path).map_err(|e| err(e.to_string()))?;
    let frames_file = frames_path(ctx, &steps.video_id);
    let frames = load_store(&frames_file).map_err(|e| err(format!("{}: {e}", frames_file.display())))?;
    let frames = decimate(&frames, ctx.cfg.frame_rate_hz).map_err(|e| err(e.to_string()))?;
    let mut rows = Vec::with_capacity(steps.len());
    for s in &steps.steps {
        let row = texts
            .row_of(&EntryId::text(s.instruction.as_str()))
            .map_err(|_| err(format!("no text embedding for step {}: {:?}", s.index, s.instruction)))?;
        rows.push(row.to_vec());
    }
    let ids = steps.steps.iter().map(|s| EntryId::text(format!("{}#{}", steps.video_id, s.index))).collect();
    let step_store = EmbeddingStore::from_rows(StoreKind::Text, ids, rows).map_err(|e| err(e.to_string()))?;
    align_video(&steps, &frames, &step_store, ctx.cfg.epsilon_s).map_err(|e| match e {
        AlignError::Infeasible { .. } => (EntryKind::Rejected, e.to_string()),
        _ => err(e.to_string()),
    })
}

fn align(ctx: &Context<'_>, dir: &Path) -> Result<StageOutput, PipelineError> {
    let files = step_files(ctx)?;
    let texts_path = ctx.cfg.paths.embeddings.join(STEP_TEXTS_FILE);
    let texts = if files.is_empty() {
        None
    } else {
        Some(load_store(&texts_path).map_err(|e| PipelineError::input(&texts_path, e))?)
    };
    let results = ctx.exec.map(&files, |path| align_one(ctx, path, texts.as_ref().expect("loaded when there is work")));
    let mut ledger = ErrorLedger::default();
    let mut records = Vec::new();
    for (path, r) in files.iter().zip(results) {
        match r {
            Ok(a) => records.push(AlignmentRecord::new(&stem(path), &a)),
            Err((kind, e)) => ledger.push(&stem(path), kind, e),
        }
    }
    cache::write_jsonl(&dir.join("alignments.jsonl"), &records)?;
    Ok((records.len(), ledger))
}

// assemble

fn stamp_assemble(ctx: &Context<'_>) -> Result<String, PipelineError> {
    let mut s = Stamp::new("assemble");
    s.file(&ctx.upstream(Stage::Align)?.join("alignments.jsonl"))?;
    s.files(&step_files(ctx)?)?.file(&ctx.cfg.paths.videos)?;
    Ok(s.finish())
}

fn assemble(ctx: &Context<'_>, dir: &Path) -> Result<StageOutput, PipelineError> {
    let videos = read_videos(&ctx.cfg.paths.videos)?;
    let extract_dir = ctx.upstream(Stage::Extract)?;
    let alignments: Vec<AlignmentRecord> = cache::read_jsonl(&ctx.upstream(Stage::Align)?.join("alignments.jsonl"))?;
    let mut ledger = ErrorLedger::default();
    let mut records = Vec::new();
    for a in &alignments {
        let Some(v) = videos.get(&a.video_id) else {
            ledger.push(&a.video_id, EntryKind::Error, "no task metadata in the videos file");
            continue;
        };
        let meta = VideoMeta { task_id: v.task_id, task_name: v.task_name.clone(), category: v.category.clone() };
        let built = cache::read_json::<StepList>(&extract_dir.join(format!("{}.json", a.video_id)))
            .map_err(|e| e.to_string())
            .and_then(|steps| assemble_sequence(&steps, &a.to_alignment(), &meta).map_err(|e| e.to_string()));
        match built {
            Ok(r) => records.push(r),
            Err(e) => ledger.push(&a.video_id, EntryKind::Error, e),
        }
    }
    records.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let manifest = DatasetManifest::new(records, Split::All).map_err(|e| PipelineError::stage(Stage::Assemble, e))?;
    cache::write_atomic(&dir.join("manifest.jsonl"), manifest.to_jsonl_string().as_bytes())?;
    Ok((manifest.len(), ledger))
}

// stats / split / sample

fn read_manifest(path: &Path) -> Result<DatasetManifest, PipelineError> {
    let f = fs::File::open(path).map_err(|e| PipelineError::input(path, e))?;
    DatasetManifest::read_jsonl(std::io::BufReader::new(f)).map_err(|e| PipelineError::input(path, e))
}

fn manifest_path(ctx: &Context<'_>) -> Result<PathBuf, PipelineError> {
    Ok(ctx.upstream(Stage::Assemble)?.join("manifest.jsonl"))
}

fn stamp_stats(ctx: &Context<'_>) -> Result<String, PipelineError> {
    Ok(Stamp::new("stats").file(&manifest_path(ctx)?)?.finish())
}

fn stats(ctx: &Context<'_>, dir: &Path) -> Result<StageOutput, PipelineError> {
    let m = read_manifest(&manifest_path(ctx)?)?;
    let s = compute_stats(&m).map_err(|e| PipelineError::stage(Stage::Stats, e))?;
    log::info!("{}", s.summary());
    cache::write_json(&dir.join("stats.json"), &s)?;
    cache::write_atomic(&dir.join("histogram.tsv"), s.histogram_table().as_bytes())?;
    Ok((m.len(), ErrorLedger::default()))
}

fn stamp_split(ctx: &Context<'_>) -> Result<String, PipelineError> {
    let mut s = Stamp::new("split");
    s.param("seed", &ctx.cfg.seed).param("split", &ctx.cfg.split);
    Ok(s.file(&manifest_path(ctx)?)?.finish())
}

fn split(ctx: &Context<'_>, dir: &Path) -> Result<StageOutput, PipelineError> {
    let m = read_manifest(&manifest_path(ctx)?)?;
    let (train, test) = split_dataset(&m, ctx.cfg.split.n_test_tasks, ctx.cfg.split.per_task_quota, ctx.cfg.seed)
        .map_err(|e| PipelineError::stage(Stage::Split, e))?;
    cache::write_atomic(&dir.join("train.jsonl"), train.to_jsonl_string().as_bytes())?;
    cache::write_atomic(&dir.join("test.jsonl"), test.to_jsonl_string().as_bytes())?;
    Ok((train.len() + test.len(), ErrorLedger::default()))
}

fn stamp_sample(ctx: &Context<'_>) -> Result<String, PipelineError> {
    let mut s = Stamp::new("sample");
    s.param("seed", &ctx.cfg.seed).param("sample", &ctx.cfg.sample);
    Ok(s.file(&ctx.upstream(Stage::Split)?.join("train.jsonl"))?.finish())
}

fn sample(ctx: &Context<'_>, dir: &Path) -> Result<StageOutput, PipelineError> {
    let train = read_manifest(&ctx.upstream(Stage::Split)?.join("train.jsonl"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    rng.set_stream(1);
    let cfg = &ctx.cfg.sample;
    let schedule = batch_length_schedule(cfg.k_max, cfg.n_batches, &mut rng);
    let mut rows = Vec::new();
    if !train.is_empty() {
        for (batch, &k) in schedule.iter().enumerate() {
            for _ in 0..cfg.batch_size {
                let r = &train.records[rng.random_range(0..train.len())];
                let start = sample_window_start(r.items.len(), k, &mut rng);
                let end = (start + k).min(r.items.len());
                rows.push(SampledWindow {
                    batch,
                    k,
                    video_id: r.video_id.clone(),
                    start,
                    instructions: r.items[start..end].iter().map(|i| i.instruction.clone()).collect(),
                });
            }
        }
    }
    cache::write_jsonl(&dir.join("windows.jsonl"), &rows)?;
    Ok((rows.len(), ErrorLedger::default()))
}

// eval

fn read_generated(path: &Path) -> Result<Vec<GeneratedRow>, PipelineError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows: Vec<GeneratedRow> = cache::read_jsonl(path)?;
    for r in &mut rows {
        r.gen_clip = base.join(&r.gen_clip);
        r.gen_scene = base.join(&r.gen_scene);
    }
    Ok(rows)
}

fn test_manifest_path(ctx: &Context<'_>) -> PathBuf {
    ctx.dir(Stage::Split).join("test.jsonl")
}

fn stamp_eval(ctx: &Context<'_>) -> Result<String, PipelineError> {
    let e = &ctx.cfg.eval;
    let mut s = Stamp::new("eval");
    s.param("reference", &e.reference)
        .param("generated", &e.generated.is_some())
        .param("exclusion", &e.exclusion)
        .param("random_row", &e.random_row);
    s.file(&test_manifest_path(ctx))?;
    s.files([&e.prompts, &e.tasks, &e.scene_gallery])?.files(e.clip_frames.as_ref())?;
    if let Some(g) = &e.generated {
        s.file(g)?;
        for r in read_generated(g)? {
            s.file(&r.gen_clip)?.file(&r.gen_scene)?;
        }
    }
    Ok(s.finish())
}

fn load(path: &Path) -> Result<EmbeddingStore, PipelineError> {
    load_store(path).map_err(|e| PipelineError::input(path, e))
}

fn eval(ctx: &Context<'_>, dir: &Path) -> Result<StageOutput, PipelineError> {
    let e = &ctx.cfg.eval;
    let prompts = load(&e.prompts)?;
    let tasks = load(&e.tasks)?;
    let scene = load(&e.scene_gallery)?;
    let stores = EvalStores { prompts: &prompts, tasks: &tasks, scene_gallery: &scene };
    let mcfg = MetricsConfig { exclusion: e.exclusion };
    let fail = |err: crate::metrics::MetricsError| PipelineError::stage(Stage::Eval, err);
    let test_path = test_manifest_path(ctx);
    let test = if test_path.exists() { Some(read_manifest(&test_path)?) } else { None };

    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    if e.random_row {
        match &test {
            Some(m) => rows.push(("Random".into(), random_baseline(m, tasks.len()).map_err(fail)?)),
            None => log::warn!("no test split at {}; skipping the random row", test_path.display()),
        }
    }
    if let Some(kind) = e.reference {
        let m = test.as_ref().ok_or_else(|| PipelineError::input(&test_path, "missing; run `split` first"))?;
        let clip_path = e
            .clip_frames
            .as_ref()
            .ok_or_else(|| PipelineError::Config("eval.clip_frames is required for reference runs".into()))?;
        let clip = load(clip_path)?;
        let corpus = reference_sequences(m, &clip, &scene, kind).map_err(fail)?;
        let label = match kind {
            Reference::Source => "Source sequences",
            Reference::Copy => "Copy",
        };
        rows.push((label.into(), evaluate(&corpus, stores, &mcfg, ctx.exec).map_err(fail)?));
    }
    if let Some(g) = &e.generated {
        let mut corpus = Vec::new();
        for r in read_generated(g)? {
            corpus.push(GeneratedSequence {
                video_id: r.video_id,
                task_id: r.task_id,
                task_name: r.task_name,
                prompts: r.prompts,
                gen_clip: load(&r.gen_clip)?,
                gen_scene: load(&r.gen_scene)?,
                input_image_id: r.input_image,
            });
        }
        rows.push(("Generated".into(), evaluate(&corpus, stores, &mcfg, ctx.exec).map_err(fail)?));
    }
    if rows.is_empty() {
        return Err(PipelineError::Config("eval needs eval.generated, eval.reference or a test split".into()));
    }
    let labelled: Vec<(&str, &MetricReport)> = rows.iter().map(|(l, r)| (l.as_str(), r)).collect();
    let table = MetricReport::table(&labelled);
    log::info!("\n{table}");
    let json: Vec<EvalRow<'_>> = labelled.iter().map(|(method, report)| EvalRow { method, report }).collect();
    cache::write_json(&dir.join("report.json"), &json)?;
    cache::write_atomic(&dir.join("table.txt"), table.as_bytes())?;
    Ok((rows.len(), ErrorLedger::default()))
}
