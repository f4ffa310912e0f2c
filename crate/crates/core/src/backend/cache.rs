//! Append-only record/replay cache.
//!
//! Each line of the cache file is one JSON record holding the request
//! digest, the request kind, the response payload and the time it was
//! recorded. On lookup the earliest record for a digest wins, so a cache
//! file replays the run that produced it exactly.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{Backend, CompletionResponse, Embedding, Prompt};
use crate::digest::json_digest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    /// Serve only from the file; a miss is a backend failure.
    ReplayOnly,
    /// Serve hits from the file, forward misses to the inner backend and
    /// append its answers.
    RecordThrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum CachePayload {
    Completion(CompletionResponse),
    Embedding { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub digest: String,
    pub kind: String,
    pub payload: CachePayload,
    pub timestamp: i64,
}

pub struct ReplayCache {
    path: PathBuf,
    mode: CacheMode,
    inner: Option<Arc<dyn Backend>>,
    entries: RwLock<HashMap<String, CachePayload>>,
    writer: Mutex<Option<File>>,
}

fn embedding_digest(text: &str) -> String {
    json_digest(&("embed", text))
}

impl ReplayCache {
    /// Opens (or creates, in record-through mode) the cache at `path`.
    pub fn open(path: &Path, mode: CacheMode, inner: Option<Arc<dyn Backend>>) -> Result<Self> {
        if mode == CacheMode::RecordThrough && inner.is_none() {
            return Err(Error::Config(
                "record-through cache needs an inner backend".into(),
            ));
        }
        let mut entries = HashMap::new();
        match File::open(path) {
            Ok(file) => {
                for (lineno, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(|e| Error::io(path, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let record: CacheRecord = serde_json::from_str(&line).map_err(|e| {
                        Error::Config(format!(
                            "replay cache {} line {}: {e}",
                            path.display(),
                            lineno + 1
                        ))
                    })?;
                    entries.entry(record.digest).or_insert(record.payload);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && mode == CacheMode::RecordThrough => {}
            Err(e) => return Err(Error::io(path, e)),
        }
        let writer = match mode {
            CacheMode::RecordThrough => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?,
            ),
            CacheMode::ReplayOnly => None,
        };
        Ok(Self {
            path: path.to_path_buf(),
            mode,
            inner,
            entries: RwLock::new(entries),
            writer: Mutex::new(writer),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup(&self, digest: &str) -> Option<CachePayload> {
        self.entries.read().unwrap().get(digest).cloned()
    }

    fn miss(&self, digest: &str) -> Result<&Arc<dyn Backend>> {
        match (&self.inner, self.mode) {
            (Some(inner), CacheMode::RecordThrough) => Ok(inner),
            _ => Err(Error::Replay(format!(
                "replay cache {} has no entry for {digest}",
                self.path.display()
            ))),
        }
    }

    fn record(&self, digest: String, kind: String, payload: CachePayload) -> Result<CachePayload> {
        let mut writer = self.writer.lock().unwrap();
        // Another caller may have recorded the same request while we were
        // waiting on the backend; keep the first answer.
        if let Some(existing) = self.lookup(&digest) {
            return Ok(existing);
        }
        let record = CacheRecord {
            digest: digest.clone(),
            kind,
            payload: payload.clone(),
            timestamp: chrono::Utc::now().timestamp(),
        };
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_string(&record).expect("serializable record");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| Error::io(&self.path, e))?;
        }
        self.entries.write().unwrap().insert(digest, payload.clone());
        Ok(payload)
    }
}

impl Backend for ReplayCache {
    fn complete(&self, prompt: Prompt<'_>) -> Result<CompletionResponse> {
        let digest = prompt.request.digest();
        let payload = match self.lookup(&digest) {
            Some(p) => p,
            None => {
                let response = self.miss(&digest)?.complete(prompt)?;
                if response.text.trim().is_empty() {
                    return Err(Error::MalformedResponse("empty generation".into()));
                }
                self.record(
                    digest.clone(),
                    prompt.request.kind.to_string(),
                    CachePayload::Completion(response),
                )?
            }
        };
        match payload {
            CachePayload::Completion(c) => Ok(c),
            CachePayload::Embedding { .. } => Err(Error::MalformedResponse(format!(
                "cache entry {digest} holds an embedding, not a completion"
            ))),
        }
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let digest = embedding_digest(text);
        let payload = match self.lookup(&digest) {
            Some(p) => p,
            None => {
                let embedding = self.miss(&digest)?.embed(text)?;
                self.record(
                    digest.clone(),
                    "embed".into(),
                    CachePayload::Embedding {
                        values: embedding.values().to_vec(),
                    },
                )?
            }
        };
        match payload {
            CachePayload::Embedding { values } => Embedding::new(values),
            CachePayload::Completion(_) => Err(Error::MalformedResponse(format!(
                "cache entry {digest} holds a completion, not an embedding"
            ))),
        }
    }

    fn identity(&self) -> String {
        match &self.inner {
            Some(inner) => format!("replay:{}+{}", self.path.display(), inner.identity()),
            None => format!("replay:{}", self.path.display()),
        }
    }
}
