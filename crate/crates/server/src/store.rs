//! Versioned document store with optimistic concurrency.
//!
//! Every record carries a version; writes name the version they expect and
//! fail with [`StoreError::Conflict`] if someone else got there first.
//! [`update`] wraps that in a bounded read-modify-write retry loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::ops::Bound;
use std::path::{Path, PathBuf};

use parking_lot::RwLock;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("version conflict on {key}: expected {expected:?}, found {found:?}")]
    Conflict { key: String, expected: Option<u64>, found: Option<u64> },
    #[error("gave up on {key} after {attempts} conflicting attempts")]
    RetriesExhausted { key: String, attempts: u32 },
    #[error("record {key} is not valid: {message}")]
    Corrupt { key: String, message: String },
    #[error("storage i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub key: String,
    pub payload: Value,
    pub version: u64,
}

pub trait DocumentStore: Send + Sync {
    fn get(&self, key: &str) -> Result<Option<StoredRecord>, StoreError>;

    /// Writes `payload` if the stored version equals `expected` (`None`: the key
    /// must be absent). Returns the new version.
    fn compare_and_put(&self, key: &str, expected: Option<u64>, payload: Value) -> Result<u64, StoreError>;

    /// All records whose key starts with `prefix`, in key order.
    fn scan(&self, prefix: &str) -> Result<Vec<StoredRecord>, StoreError>;
}

fn cas(map: &mut BTreeMap<String, StoredRecord>, key: &str, expected: Option<u64>, payload: Value) -> Result<u64, StoreError> {
    let found = map.get(key).map(|r| r.version);
    if found != expected {
        return Err(StoreError::Conflict { key: key.to_string(), expected, found });
    }
    let version = found.unwrap_or(0) + 1;
    map.insert(key.to_string(), StoredRecord { key: key.to_string(), payload, version });
    Ok(version)
}

fn scan_map(map: &BTreeMap<String, StoredRecord>, prefix: &str) -> Vec<StoredRecord> {
    map.range::<str, _>((Bound::Included(prefix), Bound::Unbounded))
        .take_while(|(k, _)| k.starts_with(prefix))
        .map(|(_, r)| r.clone())
        .collect()
}

#[derive(Debug, Default)]
pub struct InMemoryStore {
    records: RwLock<BTreeMap<String, StoredRecord>>,
}

impl InMemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl DocumentStore for InMemoryStore {
    fn get(&self, key: &str) -> Result<Option<StoredRecord>, StoreError> {
        Ok(self.records.read().get(key).cloned())
    }

    fn compare_and_put(&self, key: &str, expected: Option<u64>, payload: Value) -> Result<u64, StoreError> {
        cas(&mut self.records.write(), key, expected, payload)
    }

    fn scan(&self, prefix: &str) -> Result<Vec<StoredRecord>, StoreError> {
        Ok(scan_map(&self.records.read(), prefix))
    }
}

/// Keeps everything in memory and rewrites a JSON snapshot after each write.
#[derive(Debug)]
pub struct FileStore {
    path: PathBuf,
    records: RwLock<BTreeMap<String, StoredRecord>>,
}

impl FileStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        let records = match fs::read_to_string(&path) {
            Ok(text) if !text.trim().is_empty() => {
                let list: Vec<StoredRecord> = serde_json::from_str(&text)
                    .map_err(|e| StoreError::Corrupt { key: path.display().to_string(), message: e.to_string() })?;
                list.into_iter().map(|r| (r.key.clone(), r)).collect()
            }
            Ok(_) => BTreeMap::new(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(StoreError::Io(e.to_string())),
        };
        Ok(Self { path, records: RwLock::new(records) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn persist(&self, map: &BTreeMap<String, StoredRecord>) -> Result<(), StoreError> {
        let io = |e: std::io::Error| StoreError::Io(e.to_string());
        let list: Vec<&StoredRecord> = map.values().collect();
        let text = serde_json::to_vec(&list).map_err(|e| StoreError::Io(e.to_string()))?;
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = self.path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&text).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, &self.path).map_err(io)
    }
}

impl DocumentStore for FileStore {
    fn get(&self, key: &str) -> Result<Option<StoredRecord>, StoreError> {
        Ok(self.records.read().get(key).cloned())
    }

    fn compare_and_put(&self, key: &str, expected: Option<u64>, payload: Value) -> Result<u64, StoreError> {
        let mut map = self.records.write();
        let previous = map.get(key).cloned();
        let version = cas(&mut map, key, expected, payload)?;
        if let Err(e) = self.persist(&map) {
            match previous {
                Some(r) => map.insert(key.to_string(), r),
                None => map.remove(key),
            };
            return Err(e);
        }
        Ok(version)
    }

    fn scan(&self, prefix: &str) -> Result<Vec<StoredRecord>, StoreError> {
        Ok(scan_map(&self.records.read(), prefix))
    }
}

// Typed helpers ----------------------------------------------------------------

fn decode<T: DeserializeOwned>(record: &StoredRecord) -> Result<T, StoreError> {
    serde_json::from_value(record.payload.clone())
        .map_err(|e| StoreError::Corrupt { key: record.key.clone(), message: e.to_string() })
}

fn encode<T: Serialize>(key: &str, value: &T) -> Result<Value, StoreError> {
    serde_json::to_value(value).map_err(|e| StoreError::Corrupt { key: key.to_string(), message: e.to_string() })
}

pub fn get_as<T: DeserializeOwned>(store: &dyn DocumentStore, key: &str) -> Result<Option<(T, u64)>, StoreError> {
    store.get(key)?.map(|r| Ok((decode(&r)?, r.version))).transpose()
}

pub fn scan_as<T: DeserializeOwned>(store: &dyn DocumentStore, prefix: &str) -> Result<Vec<T>, StoreError> {
    store.scan(prefix)?.iter().map(decode).collect()
}

/// Writes a record that must not exist yet.
pub fn insert_new<T: Serialize>(store: &dyn DocumentStore, key: &str, value: &T) -> Result<(), StoreError> {
    store.compare_and_put(key, None, encode(key, value)?).map(|_| ())
}

/// Read-modify-write with bounded retry on version conflicts.
///
/// `f` sees the current value (or `None`) and returns the replacement; it may
/// run several times and must not have side effects outside its return value.
pub fn update<T, E, F>(store: &dyn DocumentStore, key: &str, max_attempts: u32, mut f: F) -> Result<T, E>
where
    T: Serialize + DeserializeOwned,
    E: From<StoreError>,
    F: FnMut(Option<T>) -> Result<T, E>,
{
    for attempt in 0..max_attempts.max(1) {
        let current = store.get(key)?;
        let version = current.as_ref().map(|r| r.version);
        let value = current.as_ref().map(decode).transpose()?;
        let next = f(value)?;
        match store.compare_and_put(key, version, encode(key, &next)?) {
            Ok(_) => return Ok(next),
            Err(StoreError::Conflict { .. }) => {
                if attempt > 2 {
                    std::thread::yield_now();
                }
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(StoreError::RetriesExhausted { key: key.to_string(), attempts: max_attempts.max(1) }.into())
}

/// Increments the counter at `key` and returns the new value.
pub fn next_sequence(store: &dyn DocumentStore, key: &str, max_attempts: u32) -> Result<u64, StoreError> {
    update(store, key, max_attempts, |n: Option<u64>| Ok(n.unwrap_or(0) + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::sync::Arc;

    #[test]
    fn cas_rejects_stale_versions() {
        let s = InMemoryStore::new();
        assert_eq!(s.compare_and_put("a", None, json!(1)).unwrap(), 1);
        assert!(matches!(s.compare_and_put("a", None, json!(2)), Err(StoreError::Conflict { .. })));
        assert_eq!(s.compare_and_put("a", Some(1), json!(2)).unwrap(), 2);
        assert!(matches!(s.compare_and_put("a", Some(1), json!(3)), Err(StoreError::Conflict { found: Some(2), .. })));
        assert_eq!(s.get("a").unwrap().unwrap().payload, json!(2));
    }

    #[test]
    fn scan_is_prefix_bounded() {
        let s = InMemoryStore::new();
        for k in ["post/1", "post/2", "posts", "poss", "event/1"] {
            insert_new(&s, k, &k).unwrap();
        }
        let keys: Vec<String> = s.scan("post/").unwrap().into_iter().map(|r| r.key).collect();
        assert_eq!(keys, vec!["post/1", "post/2"]);
    }

    #[test]
    fn concurrent_counter_loses_nothing() {
        let s: Arc<dyn DocumentStore> = Arc::new(InMemoryStore::new());
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let s = s.clone();
                std::thread::spawn(move || (0..50).map(|_| next_sequence(s.as_ref(), "n", 10_000).unwrap()).collect::<Vec<_>>())
            })
            .collect();
        let mut all: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        all.sort();
        assert_eq!(all, (1..=400).collect::<Vec<_>>());
    }

    #[test]
    fn file_store_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.json");
        {
            let s = FileStore::open(&path).unwrap();
            insert_new(&s, "k", &json!({"x": 1})).unwrap();
            update::<Value, StoreError, _>(&s, "k", 3, |_| Ok(json!({"x": 2}))).unwrap();
        }
        let s = FileStore::open(&path).unwrap();
        let (v, version) = get_as::<Value>(&s, "k").unwrap().unwrap();
        assert_eq!((v, version), (json!({"x": 2}), 2));
    }
}
