//! Core library for a test-time scaling harness around pairwise LLM judges.
//!
//! The harness drives a text-completion backend through budget-forced
//! reflection episodes ("attempts"), records per-attempt verdicts, curates
//! supervision data by rejection sampling, and provides the numeric kernels
//! for verifiable-reward policy-gradient objectives so they can be checked
//! at desk scale without any model in the loop.
//!
//! Module map:
//!
//! - [`model`] — shared domain types (instances, verdicts, attempt records)
//! - [`trace`] — reasoning-trace parsing, verdict extraction, reflective counts
//! - [`backend`] — completion backend contract, scripted mock, HTTP client
//! - [`prompt`] — pairwise judge prompt templating
//! - [`forcing`] — the budget-forcing engine (wait-token injection)
//! - [`bench`](mod@bench) — benchmark ingest into canonical preference instances
//! - [`evaluate`] — run orchestration and scalar metrics
//! - [`curate`] — rejection-sampling curation with reflection cycles
//! - [`analysis`] — post-hoc analytics over attempt logs
//! - [`rlmath`] — policy-gradient objective kernels and gradient self-checks

pub mod analysis;
pub mod backend;
pub mod bench;
pub mod curate;
pub mod evaluate;
pub mod forcing;
pub mod model;
pub mod prompt;
pub mod rlmath;
pub mod trace;

pub use model::{AttemptRecord, EvaluationReport, JudgePrompt, PreferenceInstance, Verdict};
