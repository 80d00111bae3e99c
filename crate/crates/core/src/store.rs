//! Append-only JSONL result stores keyed by a stable trial hash.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Result};

pub trait Keyed {
    fn key(&self) -> &str;
}

/// Failed trial, kept in the store so failures are never silent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub key: String,
    pub model_id: String,
    /// Human-readable description of the trial that failed.
    pub trial: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum Line<T> {
    Ok(T),
    Error(ErrorRecord),
}

/// Hex digest (16 bytes) of the parts, separated so that no concatenation
/// of different parts collides.
pub fn trial_key(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepSummary {
    /// Trials computed in this run.
    pub computed: usize,
    /// Trials already present in the store.
    pub skipped: usize,
    pub failed: usize,
    /// Pair outcomes written in this run.
    pub outcomes: usize,
}

impl SweepSummary {
    pub fn merge(self, other: SweepSummary) -> SweepSummary {
        SweepSummary {
            computed: self.computed + other.computed,
            skipped: self.skipped + other.skipped,
            failed: self.failed + other.failed,
            outcomes: self.outcomes + other.outcomes,
        }
    }
}

/// Contents of a store file: the latest record per key.
#[derive(Debug, Clone)]
pub struct StoreContents<T> {
    pub records: Vec<T>,
    pub errors: Vec<ErrorRecord>,
    /// Lines that could not be parsed, e.g. a write cut off by an interrupt.
    pub malformed: usize,
}

pub fn read_store<T: DeserializeOwned + Keyed>(path: &Path) -> Result<StoreContents<T>> {
    let mut ok: BTreeMap<String, (usize, T)> = BTreeMap::new();
    let mut errors: BTreeMap<String, (usize, ErrorRecord)> = BTreeMap::new();
    let mut malformed = 0;
    if path.exists() {
        let file = File::open(path).map_err(io_err(path))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Line<T>>(&line) {
                Ok(Line::Ok(r)) => {
                    errors.remove(r.key());
                    ok.insert(r.key().to_owned(), (i, r));
                }
                Ok(Line::Error(e)) => {
                    if !ok.contains_key(&e.key) {
                        errors.insert(e.key.clone(), (i, e));
                    }
                }
                Err(_) => malformed += 1,
            }
        }
    }
    let mut records: Vec<_> = ok.into_values().collect();
    records.sort_by_key(|(i, _)| *i);
    let mut errors: Vec<_> = errors.into_values().collect();
    errors.sort_by_key(|(i, _)| *i);
    Ok(StoreContents {
        records: records.into_iter().map(|(_, r)| r).collect(),
        errors: errors.into_iter().map(|(_, e)| e).collect(),
        malformed,
    })
}

/// Store open for appending. Successful keys are unique; a key that only
/// has error records is retried on the next run.
pub struct JsonlStore<T> {
    path: PathBuf,
    inner: Mutex<Inner>,
    _marker: PhantomData<fn(T)>,
}

struct Inner {
    file: File,
    done: HashSet<String>,
}

impl<T: Serialize + DeserializeOwned + Keyed> JsonlStore<T> {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let contents = read_store::<T>(path)?;
        let done = contents.records.iter().map(|r| r.key().to_owned()).collect();
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path).map_err(io_err(path))?;
        // an interrupted write can leave a partial last line
        let len = file.metadata().map_err(io_err(path))?.len();
        if len > 0 {
            let mut last = [0u8; 1];
            file.seek(SeekFrom::Start(len - 1)).map_err(io_err(path))?;
            file.read_exact(&mut last).map_err(io_err(path))?;
            if last[0] != b'\n' {
                file.write_all(b"\n").map_err(io_err(path))?;
            }
        }
        Ok(JsonlStore { path: path.to_owned(), inner: Mutex::new(Inner { file, done }), _marker: PhantomData })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, key: &str) -> bool {
        self.inner.lock().unwrap().done.contains(key)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().done.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends unless the key is already recorded; returns whether it was written.
    pub fn append(&self, record: &T) -> Result<bool> {
        let mut line = serde_json::to_string(&Line::Ok(record)).expect("serializable record");
        line.push('\n');
        let mut inner = self.inner.lock().unwrap();
        if inner.done.contains(record.key()) {
            return Ok(false);
        }
        inner.file.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        inner.done.insert(record.key().to_owned());
        Ok(true)
    }

    pub fn append_error(&self, error: &ErrorRecord) -> Result<()> {
        let mut line = serde_json::to_string(&Line::<T>::Error(error.clone())).expect("serializable record");
        line.push('\n');
        let mut inner = self.inner.lock().unwrap();
        inner.file.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        Ok(())
    }

    pub fn flush(&self) -> Result<()> {
        self.inner.lock().unwrap().file.flush().map_err(io_err(&self.path))
    }

    pub fn contents(&self) -> Result<StoreContents<T>> {
        self.flush()?;
        read_store(&self.path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct R {
        key: String,
        v: u32,
    }

    impl Keyed for R {
        fn key(&self) -> &str {
            &self.key
        }
    }

    fn r(key: &str, v: u32) -> R {
        R { key: key.into(), v }
    }

    #[test]
    fn duplicate_keys_are_not_rewritten() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let store = JsonlStore::<R>::open(&path).unwrap();
        assert!(store.append(&r("a", 1)).unwrap());
        assert!(!store.append(&r("a", 2)).unwrap());
        drop(store);
        let store = JsonlStore::<R>::open(&path).unwrap();
        assert!(store.contains("a"));
        assert!(!store.append(&r("a", 3)).unwrap());
        assert_eq!(store.contents().unwrap().records, vec![r("a", 1)]);
    }

    #[test]
    fn errors_are_kept_until_a_success_replaces_them() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let store = JsonlStore::<R>::open(&path).unwrap();
        let err = ErrorRecord { key: "b".into(), model_id: "m".into(), trial: "t".into(), error: "boom".into() };
        store.append_error(&err).unwrap();
        assert!(!store.contains("b"));
        assert_eq!(store.contents().unwrap().errors, vec![err]);
        store.append(&r("b", 7)).unwrap();
        let c = store.contents().unwrap();
        assert!(c.errors.is_empty());
        assert_eq!(c.records, vec![r("b", 7)]);
    }

    #[test]
    fn truncated_last_line_is_skipped_and_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        std::fs::write(&path, "{\"status\":\"ok\",\"key\":\"a\",\"v\":1}\n{\"status\":\"ok\",\"ke").unwrap();
        let store = JsonlStore::<R>::open(&path).unwrap();
        store.append(&r("c", 2)).unwrap();
        let c = store.contents().unwrap();
        assert_eq!(c.records, vec![r("a", 1), r("c", 2)]);
        assert_eq!(c.malformed, 1);
    }

    #[test]
    fn keys_separate_parts() {
        assert_ne!(trial_key(&["ab", "c"]), trial_key(&["a", "bc"]));
        assert_eq!(trial_key(&["x"]), trial_key(&["x"]));
    }

    #[test]
    fn concurrent_appends_keep_keys_unique() {
        use rayon::prelude::*;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let store = JsonlStore::<R>::open(&path).unwrap();
        (0..400u32).into_par_iter().for_each(|i| {
            store.append(&r(&format!("k{}", i % 100), i)).unwrap();
        });
        let c = store.contents().unwrap();
        assert_eq!(c.records.len(), 100);
        assert_eq!(c.malformed, 0);
    }
}
