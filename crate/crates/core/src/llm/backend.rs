//! Completion backends: an OpenAI-compatible HTTP client, a gold-label mock
//! oracle, and a replay cache keyed by prompt digest.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{CompletionConfig, PromptBundle};
use crate::data::MatchLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: rate limits, server errors, timeouts.
    Transient(String),
    Fatal(String),
    ReplayMiss {
        digest: String,
    },
}

impl std::fmt::Display for BackendError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendError::Transient(m) => write!(f, "transient: {m}"),
            BackendError::Fatal(m) => f.write_str(m),
            BackendError::ReplayMiss { digest } => write!(f, "replay miss for {digest}"),
        }
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, bundle: &PromptBundle, cfg: &CompletionConfig) -> Result<String, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, bundle: &PromptBundle, cfg: &CompletionConfig) -> Result<String, BackendError> {
        (**self).complete(bundle, cfg)
    }
}

pub fn prompt_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Answers from gold labels, flipping each with probability `flip`.
///
/// The random stream is seeded per batch so results do not depend on the
/// order concurrent batches are dispatched in.
#[derive(Debug, Clone)]
pub struct MockOracle {
    gold: HashMap<usize, MatchLabel>,
    flip: f64,
    seed: u64,
}

impl MockOracle {
    pub fn new(gold: HashMap<usize, MatchLabel>, flip: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&flip) {
            return Err(Error::InvalidParam(format!(
                "flip probability must be in [0, 1], got {flip}"
            )));
        }
        Ok(MockOracle { gold, flip, seed })
    }

    pub fn from_labels(labels: &[MatchLabel], flip: f64, seed: u64) -> Result<Self> {
        Self::new(labels.iter().copied().enumerate().collect(), flip, seed)
    }
}

impl Backend for MockOracle {
    fn complete(&self, bundle: &PromptBundle, _cfg: &CompletionConfig) -> Result<String, BackendError> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ (bundle.batch_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut out = String::new();
        for (n, q) in bundle.question_order.iter().enumerate() {
            let truth = self.gold.get(q).copied().unwrap_or(MatchLabel::NonMatching);
            let flipped = rng.gen_bool(self.flip);
            let said = match (truth, flipped) {
                (MatchLabel::Matching, false) | (MatchLabel::NonMatching, true) => "Yes",
                _ => "No",
            };
            out.push_str(&format!("A{}: {said}\n", n + 1));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt_digest: String,
    pub model: String,
    pub completion: String,
}

/// Serves completions recorded in a JSON-lines cache; never calls out.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    entries: HashMap<(String, String), String>,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: CacheEntry = serde_json::from_str(&line).map_err(|err| Error::Malformed {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message: err.to_string(),
            })?;
            entries.entry((e.prompt_digest, e.model)).or_insert(e.completion);
        }
        Ok(ReplayBackend { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, bundle: &PromptBundle, cfg: &CompletionConfig) -> Result<String, BackendError> {
        let digest = prompt_digest(&bundle.text);
        self.entries
            .get(&(digest.clone(), cfg.model_name.clone()))
            .cloned()
            .ok_or(BackendError::ReplayMiss { digest })
    }
}

/// Forwards to an inner backend and appends every completion to a cache file.
pub struct RecordingBackend<B> {
    inner: B,
    path: PathBuf,
    sink: Mutex<File>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B, path: &Path) -> Result<Self> {
        let sink = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(RecordingBackend {
            inner,
            path: path.to_path_buf(),
            sink: Mutex::new(sink),
        })
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn complete(&self, bundle: &PromptBundle, cfg: &CompletionConfig) -> Result<String, BackendError> {
        let completion = self.inner.complete(bundle, cfg)?;
        let entry = CacheEntry {
            prompt_digest: prompt_digest(&bundle.text),
            model: cfg.model_name.clone(),
            completion: completion.clone(),
        };
        let line = serde_json::to_string(&entry).map_err(|e| BackendError::Fatal(e.to_string()))?;
        let mut sink = self.sink.lock().expect("cache lock poisoned");
        writeln!(sink, "{line}").map_err(|e| BackendError::Fatal(format!("{}: {e}", self.path.display())))?;
        Ok(completion)
    }
}

/// OpenAI-compatible `POST {base_url}/chat/completions`.
pub struct HttpBackend {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        HttpBackend {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
        }
    }

    pub fn request_body(bundle: &PromptBundle, cfg: &CompletionConfig) -> Value {
        json!({
            "model": cfg.model_name,
            "messages": [{ "role": "user", "content": bundle.text }],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_output_tokens,
        })
    }

    pub fn completion_text(response: &Value) -> Result<String, BackendError> {
        response
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Fatal(format!("response has no choices[0].message.content: {response}")))
    }
}

impl Backend for HttpBackend {
    fn complete(&self, bundle: &PromptBundle, cfg: &CompletionConfig) -> Result<String, BackendError> {
        let mut request = self
            .agent
            .post(&format!("{}/chat/completions", self.base_url))
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.set("Authorization", &format!("Bearer {key}"));
        }
        match request.send_json(Self::request_body(bundle, cfg)) {
            Ok(resp) => {
                let body: Value = resp
                    .into_json()
                    .map_err(|e| BackendError::Transient(format!("reading response: {e}")))?;
                Self::completion_text(&body)
            }
            Err(ureq::Error::Status(code, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {body}");
                if code == 429 || code >= 500 {
                    Err(BackendError::Transient(msg))
                } else {
                    Err(BackendError::Fatal(msg))
                }
            }
            Err(ureq::Error::Transport(t)) => Err(BackendError::Transient(t.to_string())),
        }
    }
}
