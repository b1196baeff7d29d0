//! Shared domain types and their invariants.
//!
//! Everything in this module is immutable after construction and cheap to
//! clone, so values can be shared freely across worker threads.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Validation failure for a domain type.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValidationError {
    #[error("instance `{id}`: {field} must be non-empty")]
    EmptyField { id: String, field: &'static str },
    #[error("instance `{id}`: label {label} is not binary (expected 0 or 1)")]
    NonBinaryLabel { id: String, label: u8 },
    #[error("attempt record `{id}`: attempt_index must be >= 1")]
    ZeroAttemptIndex { id: String },
}

/// One pairwise preference evaluation unit: a query, two candidate answers,
/// and the ground-truth preference. Label 0 means answer A is preferred,
/// label 1 means answer B is preferred.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceInstance {
    pub id: String,
    pub query: String,
    pub answer_a: String,
    pub answer_b: String,
    pub label: u8,
    pub source_tag: String,
}

impl PreferenceInstance {
    pub fn new(
        id: impl Into<String>,
        query: impl Into<String>,
        answer_a: impl Into<String>,
        answer_b: impl Into<String>,
        label: u8,
        source_tag: impl Into<String>,
    ) -> Result<Self, ValidationError> {
        let instance = Self {
            id: id.into(),
            query: query.into(),
            answer_a: answer_a.into(),
            answer_b: answer_b.into(),
            label,
            source_tag: source_tag.into(),
        };
        instance.validate()?;
        Ok(instance)
    }

    /// Check the type invariants. Deserialized values should be passed
    /// through this before use since serde does not enforce them.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let check = |value: &str, field: &'static str| {
            if value.is_empty() {
                Err(ValidationError::EmptyField {
                    id: self.id.clone(),
                    field,
                })
            } else {
                Ok(())
            }
        };
        check(&self.id, "id")?;
        check(&self.query, "query")?;
        check(&self.answer_a, "answer_a")?;
        check(&self.answer_b, "answer_b")?;
        if self.label > 1 {
            return Err(ValidationError::NonBinaryLabel {
                id: self.id.clone(),
                label: self.label,
            });
        }
        Ok(())
    }
}

/// A rendered judge prompt together with the verdict markers the template
/// instructed the model to emit (one marker per candidate, A first).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgePrompt {
    pub template_id: String,
    pub rendered_text: String,
    pub verdict_markers: (String, String),
}

/// The judge's decision extracted from a final answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    A,
    B,
    Unparseable,
}

/// Map a verdict to the binary label convention (A = 0, B = 1).
/// Unparseable verdicts carry no label.
pub fn verdict_to_label(verdict: Verdict) -> Option<u8> {
    match verdict {
        Verdict::A => Some(0),
        Verdict::B => Some(1),
        Verdict::Unparseable => None,
    }
}

/// Whether the end-of-think marker was observed for a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceStatus {
    Closed,
    Unterminated,
}

/// Parsed structure of one generation: the think segments in generation
/// order, the text after the think block, and whether the block closed.
///
/// `token_count` is backend-reported and covers the think segments; parsers
/// that only see decoded text leave it at zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub think_segments: Vec<String>,
    pub final_text: String,
    pub status: TraceStatus,
    pub token_count: u64,
}

/// Full outcome of the k-th attempt on one instance: the cumulative trace,
/// the extracted verdict, and token/reflection accounting.
///
/// Attempt 1 is the un-forced generation; `cumulative_tokens` counts think
/// tokens generated through this attempt and is nondecreasing in
/// `attempt_index` for a fixed instance. `overflow` marks attempts that
/// could not run because the backend context limit was exceeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "AttemptRecordWire", into = "AttemptRecordWire")]
pub struct AttemptRecord {
    pub instance_id: String,
    pub attempt_index: u32,
    pub trace: ReasoningTrace,
    pub verdict: Verdict,
    pub cumulative_tokens: u64,
    pub reflective_counts: BTreeMap<String, u64>,
    pub overflow: bool,
}

/// Wire form of [`AttemptRecord`]: the trace fields are lifted to the top
/// level and the trace token count is carried by `cumulative_tokens` (the
/// engine keeps the two equal by construction).
#[derive(Serialize, Deserialize)]
struct AttemptRecordWire {
    instance_id: String,
    attempt_index: u32,
    think_segments: Vec<String>,
    final_text: String,
    status: TraceStatus,
    verdict: Verdict,
    cumulative_tokens: u64,
    reflective_counts: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "is_false")]
    overflow: bool,
}

fn is_false(flag: &bool) -> bool {
    !*flag
}

impl From<AttemptRecordWire> for AttemptRecord {
    fn from(wire: AttemptRecordWire) -> Self {
        Self {
            instance_id: wire.instance_id,
            attempt_index: wire.attempt_index,
            trace: ReasoningTrace {
                think_segments: wire.think_segments,
                final_text: wire.final_text,
                status: wire.status,
                token_count: wire.cumulative_tokens,
            },
            verdict: wire.verdict,
            cumulative_tokens: wire.cumulative_tokens,
            reflective_counts: wire.reflective_counts,
            overflow: wire.overflow,
        }
    }
}

impl From<AttemptRecord> for AttemptRecordWire {
    fn from(record: AttemptRecord) -> Self {
        Self {
            instance_id: record.instance_id,
            attempt_index: record.attempt_index,
            think_segments: record.trace.think_segments,
            final_text: record.trace.final_text,
            status: record.trace.status,
            verdict: record.verdict,
            cumulative_tokens: record.cumulative_tokens,
            reflective_counts: record.reflective_counts,
            overflow: record.overflow,
        }
    }
}

impl AttemptRecord {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.instance_id.is_empty() {
            return Err(ValidationError::EmptyField {
                id: String::new(),
                field: "instance_id",
            });
        }
        if self.attempt_index == 0 {
            return Err(ValidationError::ZeroAttemptIndex {
                id: self.instance_id.clone(),
            });
        }
        Ok(())
    }
}

/// Per-attempt state counts for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptCounts {
    pub correct: usize,
    pub incorrect: usize,
    pub unparseable: usize,
}

impl AttemptCounts {
    pub fn total(&self) -> usize {
        self.correct + self.incorrect + self.unparseable
    }
}

/// Aggregated result of an evaluation run.
///
/// All per-attempt lists have length equal to the attempt budget, except
/// `delta_relative` which has one entry per attempt >= 2 (measured against
/// attempt 1). A `delta_relative` entry is absent when attempt-1 accuracy
/// is already 1.0 and the headroom-normalized improvement is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_attempt_accuracy: Vec<f64>,
    pub delta_relative: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_relative_note: Option<String>,
    pub trend_r: Option<f64>,
    pub avg_tokens_per_attempt: Vec<f64>,
    pub counts: Vec<AttemptCounts>,
    pub instances_evaluated: usize,
    pub instances_failed: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record() -> AttemptRecord {
        let mut counts = BTreeMap::new();
        counts.insert("Wait".to_string(), 2);
        counts.insert("However".to_string(), 0);
        AttemptRecord {
            instance_id: "i1".into(),
            attempt_index: 1,
            trace: ReasoningTrace {
                think_segments: vec!["first thoughts".into()],
                final_text: "verdict: [[A]]".into(),
                status: TraceStatus::Closed,
                token_count: 42,
            },
            verdict: Verdict::A,
            cumulative_tokens: 42,
            reflective_counts: counts,
            overflow: false,
        }
    }

    #[test]
    fn verdict_to_label_convention() {
        assert_eq!(verdict_to_label(Verdict::A), Some(0));
        assert_eq!(verdict_to_label(Verdict::B), Some(1));
        assert_eq!(verdict_to_label(Verdict::Unparseable), None);
    }

    #[test]
    fn instance_validation_rejects_non_binary_label() {
        let err = PreferenceInstance::new("i", "q", "a", "b", 2, "t").unwrap_err();
        assert_eq!(
            err,
            ValidationError::NonBinaryLabel {
                id: "i".into(),
                label: 2
            }
        );
    }

    #[test]
    fn instance_validation_rejects_empty_fields() {
        assert!(PreferenceInstance::new("i", "", "a", "b", 0, "t").is_err());
        assert!(PreferenceInstance::new("", "q", "a", "b", 0, "t").is_err());
        assert!(PreferenceInstance::new("i", "q", "a", "b", 1, "").is_ok());
    }

    #[test]
    fn attempt_record_wire_schema_is_flat() {
        let record = sample_record();
        let json = serde_json::to_value(&record).unwrap();
        let object = json.as_object().unwrap();
        for key in [
            "instance_id",
            "attempt_index",
            "think_segments",
            "final_text",
            "status",
            "verdict",
            "cumulative_tokens",
            "reflective_counts",
        ] {
            assert!(object.contains_key(key), "missing wire key {key}");
        }
        // overflow is only written when set
        assert!(!object.contains_key("overflow"));
        assert!(!object.contains_key("trace"));
    }

    #[test]
    fn attempt_record_round_trip() {
        let record = sample_record();
        let line = serde_json::to_string(&record).unwrap();
        let back: AttemptRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, record);
    }

    #[test]
    fn overflow_flag_survives_round_trip() {
        let mut record = sample_record();
        record.overflow = true;
        record.verdict = Verdict::Unparseable;
        let line = serde_json::to_string(&record).unwrap();
        assert!(line.contains("\"overflow\":true"));
        let back: AttemptRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, record);
    }
}
