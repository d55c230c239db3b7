use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::Gray8;

/// One cache line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub backend_id: String,
    pub image_hash: String,
    pub text: String,
}

/// SHA-256 over the raster's dimensions and pixels, hex encoded.
pub fn image_hash(image: &Gray8) -> String {
    hex::encode(Sha256::digest(image.identity_bytes()))
}

/// Parse cache JSON lines, skipping lines that do not decode.
pub fn parse_cache_lines(text: &str) -> (Vec<CacheRecord>, usize) {
    let mut good = Vec::new();
    let mut bad = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CacheRecord>(line) {
            Ok(r) if r.image_hash.len() == 64 && r.image_hash.bytes().all(|b| b.is_ascii_hexdigit()) => good.push(r),
            _ => bad += 1,
        }
    }
    (good, bad)
}

struct Inner {
    map: HashMap<(String, String), String>,
    file: Option<File>,
}

/// OCR response cache keyed by `(backend_id, image hash)`, optionally backed
/// by an append-only JSON-lines file.
pub struct ResponseCache {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
    corrupt_lines: usize,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            path: None,
            inner: Mutex::new(Inner {
                map: HashMap::new(),
                file: None,
            }),
            corrupt_lines: 0,
        }
    }

    /// Open (creating if needed) a cache file. Undecodable lines are ignored,
    /// so the corresponding images miss and get rewritten.
    pub fn open(path: &Path) -> Result<Self> {
        let text = match std::fs::read(path) {
            Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        let (records, corrupt_lines) = parse_cache_lines(&text);
        if corrupt_lines > 0 {
            log::warn!("{}: ignoring {corrupt_lines} corrupt cache lines", path.display());
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if !text.is_empty() && !text.ends_with('\n') {
            // a torn final line must not swallow the next record
            file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        let map = records
            .into_iter()
            .map(|r| ((r.backend_id, r.image_hash), r.text))
            .collect();
        Ok(ResponseCache {
            path: Some(path.to_path_buf()),
            inner: Mutex::new(Inner { map, file: Some(file) }),
            corrupt_lines,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn corrupt_lines(&self) -> usize {
        self.corrupt_lines
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock poisoned").map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, backend_id: &str, hash: &str) -> Option<String> {
        self.inner
            .lock()
            .expect("cache lock poisoned")
            .map
            .get(&(backend_id.to_string(), hash.to_string()))
            .cloned()
    }

    pub fn insert(&self, backend_id: &str, hash: &str, text: &str) -> Result<()> {
        let mut inner = self.inner.lock().expect("cache lock poisoned");
        let key = (backend_id.to_string(), hash.to_string());
        if inner.map.get(&key).map(String::as_str) == Some(text) {
            return Ok(());
        }
        if let Some(file) = inner.file.as_mut() {
            let record = CacheRecord {
                backend_id: backend_id.to_string(),
                image_hash: hash.to_string(),
                text: text.to_string(),
            };
            let mut line = serde_json::to_string(&record).map_err(|e| Error::parse("cache", e))?;
            line.push('\n');
            let path = self.path.clone().unwrap_or_default();
            file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        inner.map.insert(key, text.to_string());
        Ok(())
    }
}
