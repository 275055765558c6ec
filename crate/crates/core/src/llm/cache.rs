use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{ChatGateway, ChatRequest, ChatResponse, GatewayError};

/// One line of the cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

struct Store {
    entries: HashMap<String, ChatResponse>,
    file: Option<File>,
}

/// Wraps a gateway with a content-addressed response cache. With a path the
/// cache persists as append-only JSON lines; without one it lives in memory.
pub struct CachedGateway<G> {
    inner: G,
    store: Mutex<Store>,
    path: Option<PathBuf>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<G: ChatGateway> CachedGateway<G> {
    pub fn in_memory(inner: G) -> Self {
        Self {
            inner,
            store: Mutex::new(Store {
                entries: HashMap::new(),
                file: None,
            }),
            path: None,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    /// Open (or create) the cache file at `path`, loading existing entries.
    pub fn open(inner: G, path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let cache_err = |e: String| GatewayError::Cache(format!("{}: {e}", path.display()));
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(|e| cache_err(e.to_string()))?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| cache_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry = serde_json::from_str(&line)
                    .map_err(|e| cache_err(format!("line {}: {e}", i + 1)))?;
                entries.insert(entry.key, entry.response);
            }
        } else if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| cache_err(e.to_string()))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| cache_err(e.to_string()))?;
        Ok(Self {
            inner,
            store: Mutex::new(Store {
                entries,
                file: Some(file),
            }),
            path: Some(path),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.store.lock().expect("cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<G: ChatGateway> ChatGateway for CachedGateway<G> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = req.cache_key(self.inner.model_name());
        if let Some(hit) = self.store.lock().expect("cache lock").entries.get(&key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit.clone());
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        // The lock is not held across the call so other requests proceed.
        let response = self.inner.chat(req)?;
        let mut store = self.store.lock().expect("cache lock");
        if store.entries.contains_key(&key) {
            return Ok(store.entries[&key].clone());
        }
        if let Some(file) = store.file.as_mut() {
            let entry = CacheEntry {
                key: key.clone(),
                request: req.clone(),
                response: response.clone(),
                timestamp: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map_or(0, |d| d.as_secs()),
            };
            let mut line =
                serde_json::to_string(&entry).map_err(|e| GatewayError::Cache(e.to_string()))?;
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|()| file.flush())
                .map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        store.entries.insert(key, response.clone());
        Ok(response)
    }
}
