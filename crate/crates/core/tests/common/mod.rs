#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stepframe::embeddings::{normalize_rows, save_store};
use stepframe::filtering::{build_filter_prompt, DEFAULT_EXCERPT_CHARS};
use stepframe::llm::MockScript;
use stepframe::steps::build_step_prompt;
use stepframe::transcript::{
    parse_transcript, serialize_transcript, transcript_excerpt, NarrationSentence, Transcript, TranscriptFormat,
};
use stepframe::{EmbeddingStore, EntryId, StoreKind};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn gaussian_unit(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

pub fn unit_store(kind: StoreKind, ids: Vec<EntryId>, rows: Vec<Vec<f32>>) -> EmbeddingStore {
    let store = EmbeddingStore::from_rows(kind, ids, rows).unwrap();
    normalize_rows(&store).unwrap()
}

pub fn text_ids<S: AsRef<str>>(keys: &[S]) -> Vec<EntryId> {
    keys.iter().map(|k| EntryId::text(k.as_ref())).collect()
}

const TASKS: [(&str, &str, [&str; 6]); 4] = [
    (
        "Bake Banana Bread",
        "Food and Entertaining",
        ["Mash the ripe bananas", "Whisk the eggs and sugar", "Fold in the flour", "Pour the batter into the tin", "Bake the loaf", "Slice the bread"],
    ),
    (
        "Make Cold Brew Coffee",
        "Food and Entertaining",
        ["Grind the coffee beans", "Add the grounds to the jar", "Pour in cold water", "Stir the mixture", "Strain the coffee", "Serve over ice"],
    ),
    (
        "Repot an Orchid",
        "Home and Garden",
        ["Remove the orchid from its pot", "Trim the dead roots", "Soak the bark mix", "Place the orchid in the new pot", "Fill around the roots", "Water the orchid"],
    ),
    (
        "Patch a Drywall Hole",
        "Home and Garden",
        ["Cut a square around the hole", "Fit the patch", "Apply joint compound", "Let the compound dry", "Sand the surface", "Paint over the patch"],
    ),
];

const NUMBER_WORDS: [&str; 12] =
    ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve"];

/// A small synthetic corpus laid out the way the pipeline expects, with a
/// mock response script that makes every stage succeed except one video whose
/// steps come back out of order (rejected) and two vlogs (filtered out).
pub struct Corpus {
    pub config: PathBuf,
    pub root: PathBuf,
    pub videos: Vec<String>,
    pub instructional: Vec<String>,
    pub malformed: String,
}

pub fn build_corpus(root: &Path, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = ["transcripts", "embeddings", "eval"];
    for d in dirs {
        fs::create_dir_all(root.join(d)).unwrap();
    }
    let clip_dim = 16;
    let scene_dim = 12;
    let mut script = MockScript::default();
    let mut videos_jsonl = String::new();
    let mut text_keys = Vec::new();
    let mut text_rows = Vec::new();
    let mut clip_ids = Vec::new();
    let mut clip_rows = Vec::new();
    let mut scene_ids = Vec::new();
    let mut scene_rows = Vec::new();
    let mut videos = Vec::new();
    let mut instructional = Vec::new();
    let formats = [TranscriptFormat::Srt, TranscriptFormat::WebVtt, TranscriptFormat::SentenceJson];

    let mut k = 0usize;
    for (task_idx, (task, category, steps)) in TASKS.iter().enumerate() {
        for copy in 0..3 {
            let id = format!("t{task_idx}_v{copy}");
            let n_steps = 3 + (task_idx + copy) % 4;
            let duration = 60.0 + 10.0 * k as f64;
            let seg = (duration - 10.0) / n_steps as f64;
            let mut sentences = vec![NarrationSentence::new(0.5, 3.0, "Hi everyone, welcome back to the channel.")];
            let mut step_json = Vec::new();
            let mut planted = Vec::new();
            for j in 0..n_steps {
                let start = ((5.0 + j as f64 * seg + 0.37) * 100.0).round() / 100.0;
                let end = ((start + seg * 0.6) * 100.0).round() / 100.0;
                let instruction = format!("{} for batch {}.", steps[j], NUMBER_WORDS[k]);
                sentences.push(NarrationSentence::new(start, end, format!("Now {}", instruction.to_lowercase())));
                step_json.push(format!(
                    "{{ \"step\": {}, \"instruction\": \"{}\", \"start_timestamp\": {:.2}, \"end_timestamp\": {:.2} }}",
                    j + 1,
                    instruction,
                    start,
                    end
                ));
                let f = rng.random_range(start.ceil() as i64..=end.floor() as i64) as f64;
                planted.push((instruction.clone(), f));
            }
            sentences.push(NarrationSentence::new(duration - 4.0, duration - 1.0, "Thanks for watching."));
            let title = format!("How to {task} (take {})", copy + 1);
            let fmt = formats[k % 3];
            write_transcript(root, &id, &title, duration, &sentences, fmt);
            let t = reparse(root, &id, &title, fmt);
            let prompt = build_filter_prompt(&t.title, &transcript_excerpt(&t, DEFAULT_EXCERPT_CHARS));
            script.insert(&prompt, format!("Yes\nExplanation: the narrator demonstrates how to {}.", task.to_lowercase()));
            if k == 4 {
                // out-of-order steps: swap the first two records
                step_json.swap(0, 1);
            }
            let response = format!(
                "Extracted Steps:\n[{{ \"WikiHow Title\": \"How to {task}\" }},\n  {{ \"steps\": [\n    {}]}}]\n",
                step_json.join(",\n    ")
            );
            script.insert(&build_step_prompt(&t.title, &t).unwrap(), response);

            // frames at 1 Hz up to the video end; step texts copy their planted frame
            let n_frames = duration as usize + 1;
            let frame_rows: Vec<Vec<f32>> = (0..n_frames).map(|_| gaussian_unit(&mut rng, clip_dim)).collect();
            let frame_ids: Vec<EntryId> = (0..n_frames).map(|f| EntryId::frame(id.as_str(), f as f64)).collect();
            for (instruction, f) in planted {
                text_keys.push(instruction);
                text_rows.push(frame_rows[f as usize].clone());
            }
            let store = unit_store(StoreKind::Frame, frame_ids.clone(), frame_rows.clone());
            save_store(&store, root.join(format!("embeddings/{id}.frames.shte"))).unwrap();
            clip_ids.extend(frame_ids.iter().cloned());
            clip_rows.extend(frame_rows);
            for fid in frame_ids {
                scene_ids.push(fid);
                scene_rows.push(gaussian_unit(&mut rng, scene_dim));
            }

            videos_jsonl.push_str(&format!(
                "{{\"video_id\":\"{id}\",\"title\":\"{title}\",\"task_id\":{},\"task_name\":\"{task}\",\"category\":\"{category}\"}}\n",
                task_idx + 1
            ));
            videos.push(id.clone());
            instructional.push(id);
            k += 1;
        }
    }

    for v in 0..2 {
        let id = format!("vlog{v}");
        let title = format!("My weekend vlog part {}", v + 1);
        let sentences = vec![
            NarrationSentence::new(1.0, 4.0, "So today we just hung out at the beach."),
            NarrationSentence::new(4.5, 9.0, "Honestly the weather was amazing."),
        ];
        write_transcript(root, &id, &title, 30.0, &sentences, TranscriptFormat::Srt);
        let t = reparse(root, &id, &title, TranscriptFormat::Srt);
        let prompt = build_filter_prompt(&t.title, &transcript_excerpt(&t, DEFAULT_EXCERPT_CHARS));
        script.insert(&prompt, "No\nExplanation: a personal vlog with no task being taught.");
        videos_jsonl.push_str(&format!(
            "{{\"video_id\":\"{id}\",\"title\":\"{title}\",\"task_id\":99,\"task_name\":\"Vlog\",\"category\":\"Personal\"}}\n"
        ));
        videos.push(id);
    }

    fs::write(root.join("videos.jsonl"), videos_jsonl).unwrap();
    fs::write(root.join("mock_responses.json"), serde_json::to_string_pretty(&script).unwrap()).unwrap();
    let texts = unit_store(StoreKind::Text, text_ids(&text_keys), text_rows);
    save_store(&texts, root.join("embeddings/steps.shte")).unwrap();
    save_store(&texts, root.join("eval/prompts.shte")).unwrap();
    let task_names: Vec<&str> = TASKS.iter().map(|t| t.0).collect();
    let task_rows = (0..task_names.len()).map(|_| gaussian_unit(&mut rng, clip_dim)).collect();
    save_store(&unit_store(StoreKind::Text, text_ids(&task_names), task_rows), root.join("eval/tasks.shte")).unwrap();
    save_store(&unit_store(StoreKind::Frame, clip_ids, clip_rows), root.join("eval/clip_frames.shte")).unwrap();
    save_store(&unit_store(StoreKind::Scene, scene_ids, scene_rows), root.join("eval/scene.shte")).unwrap();

    let config = root.join("stepframe.toml");
    fs::write(
        &config,
        format!(
            r#"seed = {seed}
workers = 2
mock_responses = "mock_responses.json"

[paths]
transcripts = "transcripts"
embeddings = "embeddings"
videos = "videos.jsonl"
output = "out"

[split]
n_test_tasks = 2
per_task_quota = 2

[sample]
n_batches = 3
batch_size = 4

[eval]
reference = "source"
prompts = "eval/prompts.shte"
tasks = "eval/tasks.shte"
scene_gallery = "eval/scene.shte"
clip_frames = "eval/clip_frames.shte"
"#
        ),
    )
    .unwrap();
    let malformed = "t1_v1".to_string();
    instructional.retain(|v| *v != malformed);
    Corpus { config, root: root.to_path_buf(), videos, instructional, malformed }
}

fn write_transcript(root: &Path, id: &str, title: &str, duration: f64, sentences: &[NarrationSentence], fmt: TranscriptFormat) {
    let t = Transcript::new(id, title, Some(duration), sentences.to_vec()).unwrap();
    let path = root.join("transcripts").join(format!("{id}.{}", fmt.extension()));
    fs::write(path, serialize_transcript(&t, fmt)).unwrap();
}

/// What the pipeline will hand to the prompts after its parse stage.
fn reparse(root: &Path, id: &str, title: &str, fmt: TranscriptFormat) -> Transcript {
    let raw = fs::read(root.join("transcripts").join(format!("{id}.{}", fmt.extension()))).unwrap();
    let mut t = parse_transcript(&raw, fmt, id).unwrap();
    if t.title.is_empty() {
        t = t.with_title(title);
    }
    parse_transcript(&serialize_transcript(&t, TranscriptFormat::SentenceJson), TranscriptFormat::SentenceJson, id).unwrap()
}

/// Every file under `dir`, relative path and bytes, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
