//! Deterministic scripted backend for tests and fixtures.
//!
//! The script maps `(instance_id, attempt_index)` to the raw continuation
//! the "model" would produce for that attempt: a think continuation (used
//! when the request carries stop sequences) and a finalization text (used
//! otherwise). Responses are a pure function of the request, so identical
//! requests always yield identical responses and retries are idempotent.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    approx_token_count, BackendError, CompletionBackend, CompletionRequest, CompletionResponse,
    StopReason,
};

/// One scripted attempt. `think` is the raw continuation for the
/// think-phase request and normally ends with the think-close marker;
/// `final_text` answers the finalization request. Explicit token counts
/// override the whitespace-token fallback. `error` short-circuits the
/// think-phase request with the named failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub instance_id: String,
    pub attempt_index: u32,
    #[serde(default)]
    pub think: String,
    #[serde(default)]
    pub final_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub think_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ScriptedFailure>,
}

/// Failure modes a script can inject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFailure {
    Transport,
    ContextLength,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("failed to read script: {0}")]
    Io(#[from] std::io::Error),
    #[error("script line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("script has duplicate entry for ({instance_id}, attempt {attempt_index})")]
    Duplicate {
        instance_id: String,
        attempt_index: u32,
    },
}

/// Scripted mock backend. Also records a transcript of every request it
/// serves so tests can assert on the exact wire traffic.
pub struct ScriptedBackend {
    script: BTreeMap<(String, u32), ScriptEntry>,
    transcript: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Result<Self, ScriptError> {
        let mut script = BTreeMap::new();
        for entry in entries {
            let key = (entry.instance_id.clone(), entry.attempt_index);
            if script.insert(key, entry.clone()).is_some() {
                return Err(ScriptError::Duplicate {
                    instance_id: entry.instance_id,
                    attempt_index: entry.attempt_index,
                });
            }
        }
        Ok(Self {
            script,
            transcript: Mutex::new(Vec::new()),
        })
    }

    /// Load a script from a JSONL file, one `ScriptEntry` object per line.
    pub fn from_jsonl(path: &Path) -> Result<Self, ScriptError> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut entries = Vec::new();
        for (index, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry =
                serde_json::from_str(&line).map_err(|source| ScriptError::Parse {
                    line: index + 1,
                    source,
                })?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    /// Every request served so far, in arrival order.
    pub fn transcript(&self) -> Vec<CompletionRequest> {
        self.transcript.lock().expect("transcript poisoned").clone()
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.transcript
            .lock()
            .expect("transcript poisoned")
            .push(request.clone());

        let tag = request.tag.as_ref().ok_or_else(|| {
            BackendError::ScriptMiss("request carries no (instance, attempt) tag".into())
        })?;
        let entry = self
            .script
            .get(&(tag.instance_id.clone(), tag.attempt_index))
            .ok_or_else(|| {
                BackendError::ScriptMiss(format!(
                    "({}, attempt {})",
                    tag.instance_id, tag.attempt_index
                ))
            })?;

        let think_phase = !request.stop_sequences.is_empty();
        if think_phase {
            if let Some(failure) = entry.error {
                return Err(match failure {
                    ScriptedFailure::Transport => BackendError::Transport {
                        attempts: 1,
                        message: "scripted transport failure".into(),
                    },
                    ScriptedFailure::ContextLength => BackendError::ContextLengthExceeded,
                });
            }
        }

        let (raw, explicit_tokens) = if think_phase {
            (entry.think.as_str(), entry.think_tokens)
        } else {
            (entry.final_text.as_str(), entry.final_tokens)
        };
        Ok(generate(raw, explicit_tokens, request))
    }
}

/// Emulate generation over the scripted raw text: halt at the earliest
/// stop sequence (excluded from the returned text), else truncate at
/// `max_tokens` whitespace tokens, else run to the natural end.
fn generate(
    raw: &str,
    explicit_tokens: Option<u64>,
    request: &CompletionRequest,
) -> CompletionResponse {
    let mut earliest: Option<(usize, &str)> = None;
    for stop in &request.stop_sequences {
        if stop.is_empty() {
            continue;
        }
        if let Some(at) = raw.find(stop.as_str()) {
            let replace = match earliest {
                Some((best, _)) => at < best,
                None => true,
            };
            if replace {
                earliest = Some((at, stop));
            }
        }
    }

    if let Some((at, stop)) = earliest {
        let text = raw[..at].to_string();
        let token_count = explicit_tokens.unwrap_or_else(|| approx_token_count(&text));
        return CompletionResponse {
            text,
            stop_reason: StopReason::StopSequence(stop.to_string()),
            token_count,
        };
    }

    let natural_tokens = explicit_tokens.unwrap_or_else(|| approx_token_count(raw));
    if natural_tokens > request.max_tokens {
        let truncated: Vec<&str> = raw
            .split_whitespace()
            .take(request.max_tokens as usize)
            .collect();
        return CompletionResponse {
            text: truncated.join(" "),
            stop_reason: StopReason::MaxTokens,
            token_count: request.max_tokens,
        };
    }

    CompletionResponse {
        text: raw.to_string(),
        stop_reason: StopReason::EndOfSequence,
        token_count: natural_tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, attempt: u32, think: &str, final_text: &str) -> ScriptEntry {
        ScriptEntry {
            instance_id: id.into(),
            attempt_index: attempt,
            think: think.into(),
            final_text: final_text.into(),
            think_tokens: None,
            final_tokens: None,
            error: None,
        }
    }

    fn think_request(id: &str, attempt: u32) -> CompletionRequest {
        CompletionRequest::new("prompt")
            .with_stop("</think>")
            .with_tag(id, attempt)
    }

    #[test]
    fn stop_sequence_is_excluded_from_text() {
        let backend =
            ScriptedBackend::new([entry("i1", 1, "reasoning</think>", "[[A]]")]).unwrap();
        let response = backend.complete(&think_request("i1", 1)).unwrap();
        assert_eq!(response.text, "reasoning");
        assert_eq!(
            response.stop_reason,
            StopReason::StopSequence("</think>".into())
        );
    }

    #[test]
    fn max_tokens_truncates() {
        // Script never reaches the stop sequence, so the token cap fires.
        let backend = ScriptedBackend::new([entry("i1", 1, "one two three four five", "")]).unwrap();
        let mut request = think_request("i1", 1);
        request.max_tokens = 3;
        let response = backend.complete(&request).unwrap();
        assert_eq!(response.text, "one two three");
        assert_eq!(response.stop_reason, StopReason::MaxTokens);
        assert_eq!(response.token_count, 3);
    }

    #[test]
    fn finalize_phase_reads_final_text() {
        let backend = ScriptedBackend::new([entry("i1", 2, "seg</think>", "final [[B]]")]).unwrap();
        let request = CompletionRequest::new("prompt").with_tag("i1", 2);
        let response = backend.complete(&request).unwrap();
        assert_eq!(response.text, "final [[B]]");
        assert_eq!(response.stop_reason, StopReason::EndOfSequence);
    }

    #[test]
    fn identical_requests_get_identical_responses() {
        let backend =
            ScriptedBackend::new([entry("i1", 1, "thoughts</think>", "[[A]]")]).unwrap();
        let request = think_request("i1", 1);
        let first = backend.complete(&request).unwrap();
        let second = backend.complete(&request).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn missing_entry_is_a_script_miss() {
        let backend = ScriptedBackend::new([]).unwrap();
        let err = backend.complete(&think_request("nope", 1)).unwrap_err();
        assert!(matches!(err, BackendError::ScriptMiss(_)));
    }

    #[test]
    fn scripted_failures_surface() {
        let mut transport = entry("i1", 1, "", "");
        transport.error = Some(ScriptedFailure::Transport);
        let mut overflow = entry("i2", 1, "", "");
        overflow.error = Some(ScriptedFailure::ContextLength);
        let backend = ScriptedBackend::new([transport, overflow]).unwrap();
        assert!(matches!(
            backend.complete(&think_request("i1", 1)),
            Err(BackendError::Transport { .. })
        ));
        assert!(matches!(
            backend.complete(&think_request("i2", 1)),
            Err(BackendError::ContextLengthExceeded)
        ));
    }

    #[test]
    fn two_step_continuation_replays_in_order() {
        let backend = ScriptedBackend::new([
            entry("i1", 1, "first part</think>", ""),
            entry("i1", 2, "more</think>final", ""),
        ])
        .unwrap();
        let first = super::super::continue_with(
            &backend,
            "P: ",
            "",
            "",
            &think_request("i1", 1),
        )
        .unwrap();
        assert_eq!(first.text, "first part");
        let second = super::super::continue_with(
            &backend,
            "P: ",
            &first.text,
            " Wait,",
            &think_request("i1", 2),
        )
        .unwrap();
        assert_eq!(second.text, "more");
        // transcript shows the segments spliced in generation order
        let transcript = backend.transcript();
        assert_eq!(transcript[1].prompt, "P: first part Wait,");
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        let entries = [
            entry("i1", 1, "a</think>", "[[A]]"),
            entry("i1", 2, "b</think>", "[[B]]"),
        ];
        let lines: Vec<String> = entries
            .iter()
            .map(|e| serde_json::to_string(e).unwrap())
            .collect();
        std::fs::write(&path, lines.join("\n")).unwrap();
        let backend = ScriptedBackend::from_jsonl(&path).unwrap();
        let response = backend.complete(&think_request("i1", 2)).unwrap();
        assert_eq!(response.text, "b");
    }

    #[test]
    fn duplicate_entries_rejected() {
        let result = ScriptedBackend::new([entry("i1", 1, "", ""), entry("i1", 1, "", "")]);
        assert!(matches!(result, Err(ScriptError::Duplicate { .. })));
    }
}
