use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;

const STAMP_FILE: &str = ".stamp";

/// Content hash over a stage's parameters and input files.
pub struct Stamp {
    hasher: Sha256,
}

impl Stamp {
    pub fn new(stage: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"stage\0");
        hasher.update(stage.as_bytes());
        Self { hasher }
    }

    pub fn param<T: Serialize>(&mut self, name: &str, value: &T) -> &mut Self {
        let json = serde_json::to_vec(value).expect("parameters serialize");
        self.chunk(b"param", name.as_bytes());
        self.chunk(b"value", &json);
        self
    }

    /// Hashes a file by name and content; a missing file hashes as absent.
    pub fn file(&mut self, path: &Path) -> Result<&mut Self, PipelineError> {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.chunk(b"file", name.as_bytes());
        match fs::read(path) {
            Ok(bytes) => self.chunk(b"content", &bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => self.chunk(b"absent", b""),
            Err(e) => return Err(PipelineError::io(path, e)),
        }
        Ok(self)
    }

    pub fn files<'a>(&mut self, paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<&mut Self, PipelineError> {
        for p in paths {
            self.file(p)?;
        }
        Ok(self)
    }

    fn chunk(&mut self, tag: &[u8], bytes: &[u8]) {
        self.hasher.update(tag);
        self.hasher.update((bytes.len() as u64).to_le_bytes());
        self.hasher.update(bytes);
    }

    pub fn finish(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

/// True when `dir` holds a stamp equal to `stamp`.
pub fn is_fresh(dir: &Path, stamp: &str) -> bool {
    fs::read_to_string(dir.join(STAMP_FILE)).is_ok_and(|s| s.trim() == stamp)
}

pub fn write_stamp(dir: &Path, stamp: &str) -> Result<(), PipelineError> {
    write_atomic(&dir.join(STAMP_FILE), format!("{stamp}\n").as_bytes())
}

/// Drops a stale stamp before a stage rewrites its outputs, so an
/// interrupted run is never mistaken for a finished one.
pub fn clear_stamp(dir: &Path) -> Result<(), PipelineError> {
    match fs::remove_file(dir.join(STAMP_FILE)) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(PipelineError::io(dir, e)),
        _ => Ok(()),
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| PipelineError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    f.sync_all().map_err(|e| PipelineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("rows serialize"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::input(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| PipelineError::input(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::input(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::input(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// The video was dropped by a quality gate (malformed steps, infeasible alignment, ...).
    Rejected,
    /// Something went wrong that a rerun might fix (service failure, unreadable input).
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub video_id: String,
    pub kind: EntryKind,
    pub message: String,
}

/// Per-video failures of one stage, written to `errors.jsonl`.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorLedger {
    pub entries: Vec<LedgerEntry>,
}

impl ErrorLedger {
    pub fn push(&mut self, video_id: &str, kind: EntryKind, message: impl ToString) {
        self.entries.push(LedgerEntry { video_id: video_id.into(), kind, message: message.to_string() });
    }

    pub fn count(&self, kind: EntryKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    pub fn write(&mut self, dir: &Path) -> Result<(), PipelineError> {
        self.entries.sort_by(|a, b| a.video_id.cmp(&b.video_id).then_with(|| a.message.cmp(&b.message)));
        write_jsonl(&dir.join("errors.jsonl"), &self.entries)
    }

    pub fn read(dir: &Path) -> Self {
        Self { entries: read_jsonl(&dir.join("errors.jsonl")).unwrap_or_default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamp_tracks_content_and_params() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.json");
        fs::write(&f, "1").unwrap();
        let stamp = |eps: f64| Stamp::new("align").param("eps", &eps).file(&f).unwrap().finish();
        let s1 = stamp(15.0);
        assert_eq!(s1, stamp(15.0));
        assert_ne!(s1, stamp(5.0));
        fs::write(&f, "2").unwrap();
        assert_ne!(s1, stamp(15.0));
    }

    #[test]
    fn fresh_only_after_write() {
        let dir = tempfile::tempdir().unwrap();
        assert!(!is_fresh(dir.path(), "abc"));
        write_stamp(dir.path(), "abc").unwrap();
        assert!(is_fresh(dir.path(), "abc"));
        assert!(!is_fresh(dir.path(), "abd"));
        clear_stamp(dir.path()).unwrap();
        assert!(!is_fresh(dir.path(), "abc"));
    }

    #[test]
    fn ledger_sorted_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = ErrorLedger::default();
        l.push("b", EntryKind::Error, "boom");
        l.push("a", EntryKind::Rejected, "bad steps");
        l.write(dir.path()).unwrap();
        let back = ErrorLedger::read(dir.path());
        assert_eq!(back.entries[0].video_id, "a");
        assert_eq!(back.count(EntryKind::Error), 1);
        let text = fs::read_to_string(dir.path().join("errors.jsonl")).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"video_id":"a","kind":"rejected","message":"bad steps"}"#);
    }
}
