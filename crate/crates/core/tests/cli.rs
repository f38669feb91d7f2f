mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn stepframe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stepframe"))
        .args(args)
        .current_dir(cwd)
        .env_remove("STEPFRAME_API_KEY")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn full_run_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::build_corpus(dir.path(), 5);
    let o = stepframe(&["-c", "stepframe.toml", "all"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("out");

    let parsed: Vec<_> = fs::read_dir(out.join("parse")).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "json") && e.file_name() != "summary.json").collect();
    assert_eq!(parsed.len(), corpus.videos.len());

    let verdicts = jsonl(&out.join("filter/verdicts.jsonl"));
    let yes: Vec<&str> = verdicts.iter().filter(|v| v["is_instructional"] == true).map(|v| v["video_id"].as_str().unwrap()).collect();
    assert_eq!(yes.len(), 12);
    assert!(verdicts.iter().filter(|v| v["is_instructional"] == false).all(|v| v["video_id"].as_str().unwrap().starts_with("vlog")));

    let errors = jsonl(&out.join("extract/errors.jsonl"));
    assert_eq!(errors.len(), 1);
    assert_eq!(errors[0]["video_id"], corpus.malformed.as_str());
    assert_eq!(errors[0]["kind"], "rejected");
    assert!(errors[0]["message"].as_str().unwrap().contains("NONMONOTONE(2)"));

    let alignments = jsonl(&out.join("align/alignments.jsonl"));
    let aligned: Vec<&str> = alignments.iter().map(|a| a["video_id"].as_str().unwrap()).collect();
    assert_eq!(aligned, corpus.instructional.iter().map(String::as_str).collect::<Vec<_>>());
    for a in &alignments {
        for s in a["steps"].as_array().unwrap() {
            assert!((s["score"].as_f64().unwrap() - 1.0).abs() < 1e-5, "{a}");
        }
    }

    let stats: Value = serde_json::from_str(&fs::read_to_string(out.join("stats/stats.json")).unwrap()).unwrap();
    assert_eq!(stats["n_sequences"], 11);
    let test = fs::read_to_string(out.join("split/test.jsonl")).unwrap();
    assert!(test.starts_with("{\"split\":\"TEST\"}\n"));
    assert_eq!(test.lines().count(), 1 + 4);
    assert_eq!(jsonl(&out.join("sample/windows.jsonl")).len(), 12);

    let table = fs::read_to_string(out.join("eval/table.txt")).unwrap();
    let source = table.lines().find(|l| l.starts_with("Source sequences")).expect("source row");
    let values: Vec<&str> = source.split_whitespace().skip(2).collect();
    assert_eq!(&values[..2], &["1.00", "1.00"]);
    assert!(table.lines().any(|l| l.starts_with("Random")));
}

#[test]
fn rerun_skips_fresh_stages_and_redoes_stale_ones() {
    let dir = tempfile::tempdir().unwrap();
    common::build_corpus(dir.path(), 6);
    assert_eq!(code(&stepframe(&["-c", "stepframe.toml", "all"], dir.path())), 0);
    let before = common::snapshot(&dir.path().join("out"));

    let again = stepframe(&["-c", "stepframe.toml", "all"], dir.path());
    assert_eq!(code(&again), 0);
    assert_eq!(stderr(&again).matches("up to date").count(), 9, "{}", stderr(&again));
    assert_eq!(common::snapshot(&dir.path().join("out")), before);

    let o = stepframe(&["-c", "stepframe.toml", "--epsilon", "5", "align"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(!stderr(&o).contains("up to date"), "{}", stderr(&o));
    let o = stepframe(&["-c", "stepframe.toml", "filter"], dir.path());
    assert!(stderr(&o).contains("up to date"));
}

#[test]
fn stats_and_eval_print_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    common::build_corpus(dir.path(), 7);
    assert_eq!(code(&stepframe(&["-c", "stepframe.toml", "all"], dir.path())), 0);
    let stats = stepframe(&["-c", "stepframe.toml", "stats"], dir.path());
    assert!(String::from_utf8_lossy(&stats.stdout).starts_with("length\tcount\n"));
    let eval = stepframe(&["-c", "stepframe.toml", "eval"], dir.path());
    assert!(String::from_utf8_lossy(&eval.stdout).starts_with("Method"));
}

#[test]
fn sequential_and_parallel_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    common::build_corpus(dir.path(), 8);
    assert_eq!(code(&stepframe(&["-c", "stepframe.toml", "--out", "par", "--workers", "3", "all"], dir.path())), 0);
    assert_eq!(code(&stepframe(&["-c", "stepframe.toml", "--out", "seq", "--sequential", "all"], dir.path())), 0);
    assert_eq!(common::snapshot(&dir.path().join("par")), common::snapshot(&dir.path().join("seq")));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&stepframe(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&stepframe(&["align", "--epsilon", "wide"], dir.path())), 1);
    assert_eq!(code(&stepframe(&["--help"], dir.path())), 0);
}

#[test]
fn configuration_and_input_problems_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&stepframe(&["-c", "missing.toml", "parse"], dir.path())), 2);

    fs::write(dir.path().join("bad.toml"), "epsilon_s = -1.0\n").unwrap();
    assert_eq!(code(&stepframe(&["-c", "bad.toml", "parse"], dir.path())), 2);
    fs::write(dir.path().join("typo.toml"), "epsilon = 3.0\n").unwrap();
    assert_eq!(code(&stepframe(&["-c", "typo.toml", "parse"], dir.path())), 2);

    common::build_corpus(dir.path(), 9);
    // align before anything has been extracted
    assert_eq!(code(&stepframe(&["-c", "stepframe.toml", "align"], dir.path())), 2);

    // no response script and no credentials
    fs::write(dir.path().join("live.toml"), "[paths]\noutput = \"out\"\n").unwrap();
    assert_eq!(code(&stepframe(&["-c", "stepframe.toml", "parse"], dir.path())), 0);
    let o = stepframe(&["-c", "live.toml", "filter"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("STEPFRAME_API_KEY"));
}

#[test]
fn per_video_errors_exit_3_and_land_in_the_ledger() {
    let dir = tempfile::tempdir().unwrap();
    common::build_corpus(dir.path(), 10);
    // a transcript the response script knows nothing about
    fs::write(dir.path().join("transcripts/stray.srt"), "1\n00:00:01,000 --> 00:00:03,000\nHello there.\n").unwrap();
    // and one that does not parse
    fs::write(dir.path().join("transcripts/broken.vtt"), "not a caption file\n").unwrap();
    let o = stepframe(&["-c", "stepframe.toml", "all"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let parse_errors = jsonl(&dir.path().join("out/parse/errors.jsonl"));
    assert_eq!(parse_errors.len(), 1);
    assert_eq!(parse_errors[0]["video_id"], "broken");
    assert_eq!(parse_errors[0]["kind"], "error");
    let filter_errors = jsonl(&dir.path().join("out/filter/errors.jsonl"));
    assert_eq!(filter_errors.len(), 1);
    assert_eq!(filter_errors[0]["video_id"], "stray");
    // the rest of the corpus still goes all the way through
    assert!(dir.path().join("out/eval/table.txt").exists());
}
