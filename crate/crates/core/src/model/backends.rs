use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelBackend, ModelRequest, ModelResponse};
use crate::error::{Error, Result};

/// One scripted reply. `match` is compared against the request tag (with any
/// `;note` suffix removed) and then searched for in the prompt text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub pattern: String,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRecord {
    pub request_tag: String,
    pub image_parts: usize,
    pub text: String,
    pub body_sha256: String,
}

impl CallRecord {
    pub fn of(req: &ModelRequest) -> Self {
        CallRecord {
            request_tag: req.request_tag.clone(),
            image_parts: req.image_parts(),
            text: req.text(),
            body_sha256: hex::encode(Sha256::digest(req.wire_body())),
        }
    }
}

pub struct MockBackend {
    name: String,
    script: Vec<ScriptEntry>,
    latency_ms: u64,
    log: Mutex<Vec<CallRecord>>,
}

impl MockBackend {
    pub fn new(name: impl Into<String>, script: Vec<ScriptEntry>) -> Self {
        MockBackend {
            name: name.into(),
            script,
            latency_ms: 0,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Latency reported on every response.
    pub fn with_latency(mut self, ms: u64) -> Self {
        self.latency_ms = ms;
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let script: Vec<ScriptEntry> =
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(MockBackend::new(name, script))
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("mock log poisoned").len()
    }

    pub fn clear_log(&self) {
        self.log.lock().expect("mock log poisoned").clear();
    }

    fn lookup(&self, req: &ModelRequest, text: &str) -> Option<&ScriptEntry> {
        let tag = req.request_tag.split(';').next().unwrap_or("");
        self.script.iter().find(|e| e.pattern == tag).or_else(|| {
            self.script
                .iter()
                .find(|e| !e.pattern.is_empty() && text.contains(&e.pattern))
        })
    }
}

impl ModelBackend for MockBackend {
    fn backend_id(&self) -> String {
        format!("mock:{}", self.name)
    }

    fn complete(&self, req: &ModelRequest) -> Result<ModelResponse> {
        let record = CallRecord::of(req);
        let text = record.text.clone();
        self.log.lock().expect("mock log poisoned").push(record);
        match self.lookup(req, &text) {
            Some(e) => Ok(ModelResponse {
                raw_text: e.reply.clone(),
                latency_ms: self.latency_ms,
                token_usage: None,
                backend_id: self.backend_id(),
            }),
            None => Err(Error::Protocol {
                message: format!("no scripted reply for request {:?}", req.request_tag),
                excerpt: text.chars().take(120).collect(),
            }),
        }
    }
}

/// Counts requests passing through to the wrapped backend.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: ModelBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        CountingBackend {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<B: ModelBackend> ModelBackend for CountingBackend<B> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn complete(&self, req: &ModelRequest) -> Result<ModelResponse> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.complete(req)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub backend_id: String,
    pub model_id: String,
    pub body_sha256: String,
}

impl CacheKey {
    pub fn new(backend_id: &str, req: &ModelRequest) -> Self {
        CacheKey {
            backend_id: backend_id.to_string(),
            model_id: req.model_id.clone(),
            body_sha256: hex::encode(Sha256::digest(req.wire_body())),
        }
    }

    pub fn file_name(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.backend_id, &self.model_id, &self.body_sha256] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        format!("{}.json", hex::encode(h.finalize()))
    }
}

/// Content-addressed response cache in front of another backend. The prompt
/// set version is part of the cache namespace.
pub struct CachingBackend<B> {
    inner: B,
    dir: PathBuf,
    namespace: String,
    hits: AtomicUsize,
    misses: AtomicUsize,
    tmp_counter: AtomicU64,
}

impl<B: ModelBackend> CachingBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>, prompt_version: &str) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(CachingBackend {
            inner,
            dir,
            namespace: prompt_version.to_string(),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn key(&self, req: &ModelRequest) -> CacheKey {
        CacheKey::new(&self.backend_id(), req)
    }

    fn store(&self, path: &Path, resp: &ModelResponse) -> Result<()> {
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = path.with_extension(format!("tmp-{}-{n}", std::process::id()));
        let bytes = serde_json::to_vec(resp).expect("response serializes");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

impl<B: ModelBackend> ModelBackend for CachingBackend<B> {
    fn backend_id(&self) -> String {
        format!("{}@prompts-{}", self.inner.backend_id(), self.namespace)
    }

    fn complete(&self, req: &ModelRequest) -> Result<ModelResponse> {
        let path = self.dir.join(self.key(req).file_name());
        if let Ok(bytes) = std::fs::read(&path) {
            match serde_json::from_slice::<ModelResponse>(&bytes) {
                Ok(resp) => {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(resp);
                }
                Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", path.display()),
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let resp = self.inner.complete(req)?;
        self.store(&path, &resp)?;
        Ok(resp)
    }
}
