//! Batch prompt construction, LLM dispatch and answer parsing.

mod backend;
mod parse;
mod prompt;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use backend::{
    prompt_digest, Backend, BackendError, CacheEntry, HttpBackend, MockOracle, RecordingBackend, ReplayBackend,
};
pub use parse::{parse_batch_answers, Answer, BatchAnswer};
pub use prompt::{build_batch_prompt, standard_prompting_tokens, PromptBundle, DEFAULT_TASK_DESCRIPTION};

use crate::costeval::SharedLedger;
use crate::error::{Error, Result};
use crate::serialize::Tokenizer;

pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionConfig {
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub retries: u32,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig {
            model_name: "gpt-3.5-turbo-0301".to_string(),
            temperature: DEFAULT_TEMPERATURE,
            max_output_tokens: 256,
            retries: 3,
            backoff_ms: 500,
        }
    }
}

impl CompletionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "temperature must be nonnegative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Send one prompt, retrying transient failures with exponential backoff.
/// Prompt and completion tokens are deposited on success.
pub fn complete(
    bundle: &PromptBundle,
    cfg: &CompletionConfig,
    backend: &dyn Backend,
    ledger: &SharedLedger,
    tokenizer: Tokenizer,
) -> Result<String> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match backend.complete(bundle, cfg) {
            Ok(text) => {
                let out_tokens = tokenizer.count(&text);
                ledger.update(|l| {
                    l.deposit_prompt(bundle.token_count);
                    l.deposit_output(out_tokens);
                });
                return Ok(text);
            }
            Err(BackendError::ReplayMiss { digest }) => return Err(Error::ReplayMiss { digest }),
            Err(BackendError::Transient(_)) if attempt <= cfg.retries => {
                let delay = cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            Err(e) => {
                return Err(Error::Backend {
                    batch_id: bundle.batch_id,
                    attempts: attempt,
                    message: e.to_string(),
                })
            }
        }
    }
}
