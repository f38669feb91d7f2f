mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stepframe::dataset::{compute_stats, sample_training_window, split_dataset, DatasetError, SequenceItem, Split};
use stepframe::{DatasetManifest, SequenceRecord};

fn stats_fixture() -> DatasetManifest {
    DatasetManifest::read_jsonl(BufReader::new(File::open(common::fixture("stats_manifest.jsonl")).unwrap())).unwrap()
}

#[test]
fn fixture_statistics_match_hand_computation() {
    let s = compute_stats(&stats_fixture()).unwrap();
    assert_eq!(s.n_sequences, 10);
    assert!((s.steps_per_seq.mean - 6.0).abs() < 1e-12);
    assert!((s.steps_per_seq.std - (92.0f64 / 5.0).sqrt()).abs() < 1e-12);
    assert!((s.words_per_step.mean - 7.9).abs() < 1e-12);
    assert!((s.words_per_step.std - (3017.0f64 / 300.0).sqrt()).abs() < 1e-12);
    assert_eq!(s.pct_len_2_to_16, 80.0);
    assert_eq!(s.length_histogram.values().sum::<usize>(), 10);
    assert_eq!(s.category_distribution["Home and Garden"], 3);
    assert!(s.histogram_table().starts_with("length\tcount\n1\t1\n"));
    assert!(s.summary().contains("6.0 (± 4.3) steps per sequence"), "{}", s.summary());
}

#[test]
fn manifest_jsonl_round_trips() {
    let m = stats_fixture();
    let text = m.to_jsonl_string();
    assert!(text.starts_with("{\"split\":\"ALL\"}\n"));
    let back = DatasetManifest::read_jsonl(text.as_bytes()).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_jsonl_string(), text);
}

#[test]
fn headerless_manifests_are_accepted() {
    let text = stats_fixture().to_jsonl_string();
    let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    assert_eq!(DatasetManifest::read_jsonl(body.as_bytes()).unwrap().len(), 10);
}

#[test]
fn bad_lines_report_their_position() {
    let mut text = stats_fixture().to_jsonl_string();
    text.push_str("{not json}\n");
    assert!(matches!(DatasetManifest::read_jsonl(text.as_bytes()), Err(DatasetError::Json { line: 12, .. })));
}

fn corpus(n_tasks: u32, per_task: usize) -> DatasetManifest {
    let categories = ["Arts", "Cars", "Food", "Garden"];
    let mut records = Vec::new();
    for t in 0..n_tasks {
        for v in 0..per_task {
            let score = ((t as usize * 31 + v * 17) % 23) as f64 / 23.0;
            records.push(SequenceRecord {
                video_id: format!("t{t:02}v{v:02}"),
                task_id: t,
                task_name: format!("task {t}"),
                category: categories[t as usize % 4].to_string(),
                items: (0..3)
                    .map(|i| SequenceItem { instruction: format!("do {i}"), frame_timestamp: i as f64, alignment_score: score })
                    .collect(),
            });
        }
    }
    DatasetManifest::new(records, Split::All).unwrap()
}

#[test]
fn split_partitions_and_respects_quota() {
    let m = corpus(30, 6);
    let (train, test) = split_dataset(&m, 10, 4, 9).unwrap();
    assert_eq!(train.split, Split::Train);
    assert_eq!(test.split, Split::Test);
    assert_eq!(train.len() + test.len(), m.len());
    let test_ids: BTreeSet<_> = test.records.iter().map(|r| &r.video_id).collect();
    assert!(train.records.iter().all(|r| !test_ids.contains(&r.video_id)));

    let mut per_task: BTreeMap<u32, Vec<&SequenceRecord>> = BTreeMap::new();
    for r in &test.records {
        per_task.entry(r.task_id).or_default().push(r);
    }
    assert_eq!(per_task.len(), 10);
    for (task, picked) in per_task {
        assert_eq!(picked.len(), 4);
        let worst_picked = picked.iter().map(|r| r.mean_score()).fold(f64::INFINITY, f64::min);
        let best_left = train.records.iter().filter(|r| r.task_id == task).map(|r| r.mean_score()).fold(f64::NEG_INFINITY, f64::max);
        assert!(worst_picked >= best_left);
    }
    assert!(test.records.windows(2).all(|w| w[0].video_id < w[1].video_id));
}

#[test]
fn split_is_seeded() {
    let m = corpus(30, 3);
    assert_eq!(split_dataset(&m, 8, 2, 1).unwrap(), split_dataset(&m, 8, 2, 1).unwrap());
    let a: Vec<_> = (0..6).map(|seed| split_dataset(&m, 8, 2, seed).unwrap().1).collect();
    assert!(a.iter().any(|t| *t != a[0]));
}

#[test]
fn split_needs_enough_tasks() {
    let m = corpus(3, 2);
    assert!(matches!(split_dataset(&m, 5, 1, 0), Err(DatasetError::InsufficientTasks { requested: 5, available: 3 })));
}

#[test]
fn short_sequences_come_back_whole() {
    let m = stats_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for r in &m.records {
        let w = sample_training_window(r, 8, &mut rng);
        assert_eq!(w.items.len(), r.items.len().min(8));
        assert_eq!(w.video_id, r.video_id);
    }
}
