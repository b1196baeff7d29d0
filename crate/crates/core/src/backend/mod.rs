//! Completion backend contract.
//!
//! Budget forcing needs raw-continuation semantics: a prompt goes in, a
//! continuation comes out, and generation halts at a stop sequence so the
//! caller controls what replaces it. Chat-turn APIs cannot splice text into
//! the middle of an assistant turn, so the contract here is a plain
//! text-completion endpoint with stop-sequence support.

mod http;
mod scripted;

pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::{ScriptEntry, ScriptError, ScriptedBackend, ScriptedFailure};

use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifies which episode and attempt a request belongs to. Carried as
/// client-side metadata only; it is never sent over the wire. The scripted
/// backend keys its responses on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTag {
    pub instance_id: String,
    pub attempt_index: u32,
}

/// One completion request. `max_tokens` bounds a single generated segment,
/// not the whole episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub stop_sequences: Vec<String>,
    pub max_tokens: u64,
    pub temperature: f64,
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag: Option<RequestTag>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            stop_sequences: Vec::new(),
            max_tokens: 8192,
            temperature: 0.0,
            seed: None,
            tag: None,
        }
    }

    pub fn with_stop(mut self, stop: impl Into<String>) -> Self {
        self.stop_sequences.push(stop.into());
        self
    }

    pub fn with_tag(mut self, instance_id: impl Into<String>, attempt_index: u32) -> Self {
        self.tag = Some(RequestTag {
            instance_id: instance_id.into(),
            attempt_index,
        });
        self
    }
}

/// Why generation halted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// Generation hit one of the requested stop sequences. The matched
    /// sequence is reported; the response text excludes it.
    StopSequence(String),
    MaxTokens,
    EndOfSequence,
}

/// One generated segment. `token_count` counts only newly generated tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub stop_reason: StopReason,
    pub token_count: u64,
}

#[derive(Debug, Error)]
pub enum BackendError {
    /// Transport-level failure; already retried up to the configured limit.
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    /// Backend returned a non-success status; already retried when retryable.
    #[error("backend returned status {status} after {attempts} attempt(s): {message}")]
    Status {
        status: u16,
        attempts: u32,
        message: String,
    },
    /// The prompt no longer fits the backend context window. Not retryable;
    /// surfaces as an instance-level failure.
    #[error("prompt exceeds backend context limit")]
    ContextLengthExceeded,
    #[error("scripted backend has no entry for this request: {0}")]
    ScriptMiss(String),
    #[error("backend credential environment variable `{0}` is not set")]
    MissingCredential(String),
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
}

impl BackendError {
    /// Context overflow is the one error that must keep the episode alive
    /// so the harness can keep measuring the remaining attempts.
    pub fn is_context_overflow(&self) -> bool {
        matches!(self, BackendError::ContextLengthExceeded)
    }
}

/// A text-completion backend. Implementations must be shareable across
/// worker threads; each in-flight request is independent.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

/// Continue a generation: issue a completion whose prompt is the verbatim
/// concatenation of the original prompt, everything generated so far, and
/// an injected string. The injection is concatenated exactly as given, so
/// any separating whitespace must be part of it. Returns only the new
/// segment.
pub fn continue_with(
    backend: &dyn CompletionBackend,
    previous_prompt: &str,
    accumulated: &str,
    injection: &str,
    overrides: &CompletionRequest,
) -> Result<CompletionResponse, BackendError> {
    let mut request = overrides.clone();
    request.prompt = format!("{previous_prompt}{accumulated}{injection}");
    backend.complete(&request)
}

/// Bounded-concurrency gate for outstanding backend requests.
///
/// A plain counting semaphore: `acquire` blocks until a permit is free and
/// returns a guard that releases it on drop.
pub struct ConcurrencyLimiter {
    permits: Mutex<usize>,
    available: Condvar,
    capacity: usize,
}

impl ConcurrencyLimiter {
    pub fn new(capacity: usize) -> Self {
        Self {
            permits: Mutex::new(capacity.max(1)),
            available: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn acquire(&self) -> LimiterGuard<'_> {
        let mut permits = self.permits.lock().expect("limiter poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("limiter poisoned");
        }
        *permits -= 1;
        LimiterGuard { limiter: self }
    }
}

pub struct LimiterGuard<'a> {
    limiter: &'a ConcurrencyLimiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.limiter.permits.lock().expect("limiter poisoned");
        *permits += 1;
        self.limiter.available.notify_one();
    }
}

/// Count whitespace-separated tokens; the fallback tokenization used by the
/// scripted backend when an entry does not state an explicit token count.
pub(crate) fn approx_token_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = Arc::new(ConcurrencyLimiter::new(2));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|scope| {
            for _ in 0..8 {
                let limiter = Arc::clone(&limiter);
                let in_flight = Arc::clone(&in_flight);
                let peak = Arc::clone(&peak);
                scope.spawn(move || {
                    let _guard = limiter.acquire();
                    let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(std::time::Duration::from_millis(5));
                    in_flight.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn continue_with_concatenates_verbatim() {
        struct Echo;
        impl CompletionBackend for Echo {
            fn complete(
                &self,
                request: &CompletionRequest,
            ) -> Result<CompletionResponse, BackendError> {
                Ok(CompletionResponse {
                    text: request.prompt.clone(),
                    stop_reason: StopReason::EndOfSequence,
                    token_count: 0,
                })
            }
        }
        let overrides = CompletionRequest::new("");
        let seen = continue_with(&Echo, "P: ", "abc", " Wait,", &overrides).unwrap();
        assert_eq!(seen.text, "P: abc Wait,");
        let plain = continue_with(&Echo, "P: ", "abc", "", &overrides).unwrap();
        assert_eq!(plain.text, "P: abc");
    }
}
