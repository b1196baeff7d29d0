//! HTTP completion client.
//!
//! Wire contract: POST a JSON body `{prompt, stop, max_tokens, temperature,
//! seed}` to the configured URL with a bearer credential taken from an
//! environment variable. The response carries `{text, finish_reason,
//! usage: {completion_tokens}}`. Transport failures and 429/5xx statuses
//! are retried with exponential backoff up to the configured limit;
//! context-length rejections (HTTP 413, or a 400 whose body mentions the
//! context limit) are surfaced immediately as non-retryable.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    approx_token_count, BackendError, CompletionBackend, CompletionRequest, CompletionResponse,
    ConcurrencyLimiter, StopReason,
};

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub url: String,
    /// Name of the environment variable holding the bearer credential.
    pub credential_env: String,
    pub retries: u32,
    pub timeout: Duration,
    pub backoff_base: Duration,
    pub limiter_size: usize,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            url: "http://localhost:8000/v1/completions".into(),
            credential_env: "STTS_API_KEY".into(),
            retries: 3,
            timeout: Duration::from_secs(120),
            backoff_base: Duration::from_millis(250),
            limiter_size: 8,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    stop: &'a [String],
    max_tokens: u64,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireUsage {
    completion_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
    finish_reason: Option<String>,
    usage: Option<WireUsage>,
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    credential: String,
    client: reqwest::blocking::Client,
    limiter: Arc<ConcurrencyLimiter>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let credential = std::env::var(&config.credential_env)
            .map_err(|_| BackendError::MissingCredential(config.credential_env.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        let limiter = Arc::new(ConcurrencyLimiter::new(config.limiter_size));
        Ok(Self {
            config,
            credential,
            client,
            limiter,
        })
    }

    pub fn limiter(&self) -> Arc<ConcurrencyLimiter> {
        Arc::clone(&self.limiter)
    }

    fn send_once(&self, request: &CompletionRequest) -> Result<CompletionResponse, OneShotError> {
        let body = WireRequest {
            prompt: &request.prompt,
            stop: &request.stop_sequences,
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            seed: request.seed,
        };
        let response = self
            .client
            .post(&self.config.url)
            .bearer_auth(&self.credential)
            .json(&body)
            .send()
            .map_err(|e| OneShotError::Transport(e.to_string()))?;

        let status = response.status();
        let text = response
            .text()
            .map_err(|e| OneShotError::Transport(e.to_string()))?;

        if status.as_u16() == 413
            || (status.as_u16() == 400 && text.to_ascii_lowercase().contains("context"))
        {
            return Err(OneShotError::ContextLength);
        }
        if !status.is_success() {
            return Err(OneShotError::Status {
                status: status.as_u16(),
                retryable: status.as_u16() == 429 || status.is_server_error(),
                message: truncate(&text, 200),
            });
        }

        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| OneShotError::Invalid(format!("{e}: {}", truncate(&text, 200))))?;
        Ok(decode(wire, request))
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let _permit = self.limiter.acquire();
            match self.send_once(request) {
                Ok(response) => return Ok(response),
                Err(OneShotError::ContextLength) => {
                    return Err(BackendError::ContextLengthExceeded)
                }
                Err(OneShotError::Invalid(message)) => {
                    return Err(BackendError::InvalidResponse(message))
                }
                Err(OneShotError::Transport(message)) => {
                    if attempts > self.config.retries {
                        return Err(BackendError::Transport { attempts, message });
                    }
                }
                Err(OneShotError::Status {
                    status,
                    retryable,
                    message,
                }) => {
                    if !retryable || attempts > self.config.retries {
                        return Err(BackendError::Status {
                            status,
                            attempts,
                            message,
                        });
                    }
                }
            }
            let backoff = self.config.backoff_base * 2u32.saturating_pow(attempts - 1);
            std::thread::sleep(backoff);
        }
    }
}

enum OneShotError {
    Transport(String),
    Status {
        status: u16,
        retryable: bool,
        message: String,
    },
    ContextLength,
    Invalid(String),
}

fn decode(wire: WireResponse, request: &CompletionRequest) -> CompletionResponse {
    let stop_reason = match wire.finish_reason.as_deref() {
        Some("stop") | Some("stop_sequence") => {
            // The server does not say which sequence matched; report the
            // first configured one, or EOS when none was requested.
            match request.stop_sequences.first() {
                Some(stop) => StopReason::StopSequence(stop.clone()),
                None => StopReason::EndOfSequence,
            }
        }
        Some("length") | Some("max_tokens") => StopReason::MaxTokens,
        _ => StopReason::EndOfSequence,
    };
    let token_count = wire
        .usage
        .and_then(|u| u.completion_tokens)
        .unwrap_or_else(|| approx_token_count(&wire.text));
    CompletionResponse {
        text: wire.text,
        stop_reason,
        token_count,
    }
}

fn truncate(text: &str, limit: usize) -> String {
    if text.len() <= limit {
        text.to_string()
    } else {
        let mut end = limit;
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &text[..end])
    }
}
