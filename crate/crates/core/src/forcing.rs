//! Budget forcing engine.
//!
//! One episode runs a single instance for a budget of attempts. Attempt 1
//! lets the model reason until the end-of-think marker and answer; each
//! further attempt strips the previous finalization, splices the reflective
//! injection where the end-of-think marker would have been, and continues
//! reasoning until the marker appears again. The verdict is snapshotted at
//! every attempt by finalizing, recording, and discarding the finalization
//! so the episode can continue from the think boundary.
//!
//! Episodes are strictly sequential (attempt k+1 extends attempt k);
//! distinct instances run concurrently under the backend's limiter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    continue_with, BackendError, CompletionBackend, CompletionRequest, StopReason,
};
use crate::model::{AttemptRecord, JudgePrompt, PreferenceInstance, ReasoningTrace, TraceStatus, Verdict};
use crate::trace::{count_reflective, extract_verdict, MarkerConfig, ReflectiveLexicon};

/// Engine configuration for one run.
///
/// `injection` is spliced verbatim in place of the end-of-think marker, so
/// the default carries a leading space and the wire reads `…reasoning Wait,`.
/// `finalize_suffix` is appended after the end-of-think marker when a
/// verdict snapshot is requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingConfig {
    pub budget: u32,
    pub injection: String,
    pub markers: MarkerConfig,
    pub finalize_suffix: String,
    pub segment_max_tokens: u64,
    pub finalize_max_tokens: u64,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for ForcingConfig {
    fn default() -> Self {
        Self {
            budget: 4,
            injection: " Wait,".into(),
            markers: MarkerConfig::default(),
            finalize_suffix: "\n\n".into(),
            segment_max_tokens: 8192,
            finalize_max_tokens: 256,
            temperature: 0.0,
            seed: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ForcingConfigError {
    #[error("budget must be >= 1")]
    ZeroBudget,
    #[error("injection must be non-empty when budget > 1")]
    EmptyInjection,
    #[error(transparent)]
    Markers(#[from] crate::trace::MarkerError),
}

impl ForcingConfig {
    pub fn validate(&self) -> Result<(), ForcingConfigError> {
        if self.budget == 0 {
            return Err(ForcingConfigError::ZeroBudget);
        }
        if self.budget > 1 && self.injection.is_empty() {
            return Err(ForcingConfigError::EmptyInjection);
        }
        self.markers.validate()?;
        Ok(())
    }
}

/// A non-overflow backend failure that ended an episode early.
#[derive(Debug, Error)]
#[error("attempt {attempt} {phase}: {source}")]
pub struct EpisodeError {
    pub attempt: u32,
    pub phase: &'static str,
    #[source]
    pub source: BackendError,
}

/// The outcome of one episode: the attempt records produced (all `budget`
/// of them on clean runs and on context overflow, fewer when a transport
/// failure cut the episode short) plus the episode-level error, if any.
#[derive(Debug)]
pub struct EpisodeOutcome {
    pub instance_id: String,
    pub records: Vec<AttemptRecord>,
    pub error: Option<EpisodeError>,
}

impl EpisodeOutcome {
    pub fn is_complete(&self, budget: u32) -> bool {
        self.error.is_none() && self.records.len() == budget as usize
    }
}

/// Incremental episode driver. `step()` produces the next attempt record;
/// curation uses this to stop forcing an instance as soon as it recovers,
/// while full evaluation drives it for the whole budget.
pub struct EpisodeRunner<'a> {
    backend: &'a dyn CompletionBackend,
    cfg: &'a ForcingConfig,
    lexicon: &'a ReflectiveLexicon,
    instance_id: String,
    base_prompt: String,
    verdict_markers: MarkerConfig,
    segments: Vec<String>,
    cumulative_tokens: u64,
    next_attempt: u32,
    overflowed: bool,
    last_status: TraceStatus,
}

impl<'a> EpisodeRunner<'a> {
    pub fn new(
        instance: &PreferenceInstance,
        prompt: &JudgePrompt,
        backend: &'a dyn CompletionBackend,
        cfg: &'a ForcingConfig,
        lexicon: &'a ReflectiveLexicon,
    ) -> Self {
        // Extraction follows the markers the prompt actually instructed.
        let mut markers = cfg.markers.clone();
        markers.verdict_pattern_a = prompt.verdict_markers.0.clone();
        markers.verdict_pattern_b = prompt.verdict_markers.1.clone();
        // The engine opens the think block itself so segments stay
        // marker-free and continuations splice at exact boundaries.
        let base_prompt = format!("{}{}", prompt.rendered_text, cfg.markers.think_open);
        Self {
            backend,
            cfg,
            lexicon,
            instance_id: instance.id.clone(),
            base_prompt,
            verdict_markers: markers,
            segments: Vec::new(),
            cumulative_tokens: 0,
            next_attempt: 1,
            overflowed: false,
            last_status: TraceStatus::Closed,
        }
    }

    /// Think text accumulated so far: segments joined by the injection.
    fn think_text(&self) -> String {
        self.segments.join(&self.cfg.injection)
    }

    fn think_request(&self, attempt: u32) -> CompletionRequest {
        CompletionRequest {
            prompt: String::new(),
            stop_sequences: vec![self.cfg.markers.think_close.clone()],
            max_tokens: self.cfg.segment_max_tokens,
            temperature: self.cfg.temperature,
            seed: self.cfg.seed,
            tag: None,
        }
        .with_tag(self.instance_id.clone(), attempt)
    }

    fn finalize_request(&self, attempt: u32) -> CompletionRequest {
        CompletionRequest {
            prompt: String::new(),
            stop_sequences: Vec::new(),
            max_tokens: self.cfg.finalize_max_tokens,
            temperature: self.cfg.temperature,
            seed: self.cfg.seed,
            tag: None,
        }
        .with_tag(self.instance_id.clone(), attempt)
    }

    fn record(&self, attempt: u32, final_text: String, verdict: Verdict) -> AttemptRecord {
        let think_text = self.think_text();
        AttemptRecord {
            instance_id: self.instance_id.clone(),
            attempt_index: attempt,
            trace: ReasoningTrace {
                think_segments: self.segments.clone(),
                final_text,
                status: self.last_status,
                token_count: self.cumulative_tokens,
            },
            verdict,
            cumulative_tokens: self.cumulative_tokens,
            reflective_counts: count_reflective(&think_text, self.lexicon),
            overflow: self.overflowed,
        }
    }

    /// Run the next attempt. After a context overflow every further attempt
    /// is an overflow-flagged unparseable record so the run keeps measuring.
    pub fn step(&mut self) -> Result<AttemptRecord, EpisodeError> {
        let attempt = self.next_attempt;
        self.next_attempt += 1;

        if self.overflowed {
            return Ok(self.record(attempt, String::new(), Verdict::Unparseable));
        }

        // Extend the think block: attempt 1 starts it, later attempts
        // splice the injection where the close marker fired.
        let injection = if attempt == 1 { "" } else { self.cfg.injection.as_str() };
        let accumulated = self.think_text();
        let think = match continue_with(
            self.backend,
            &self.base_prompt,
            &accumulated,
            injection,
            &self.think_request(attempt),
        ) {
            Ok(response) => response,
            Err(e) if e.is_context_overflow() => {
                self.overflowed = true;
                return Ok(self.record(attempt, String::new(), Verdict::Unparseable));
            }
            Err(source) => {
                return Err(EpisodeError {
                    attempt,
                    phase: "think",
                    source,
                })
            }
        };
        self.last_status = match think.stop_reason {
            StopReason::StopSequence(_) => TraceStatus::Closed,
            _ => TraceStatus::Unterminated,
        };
        self.segments.push(think.text);
        self.cumulative_tokens += think.token_count;

        // Snapshot the verdict: finalize past the think boundary, record,
        // and discard the finalization before the next attempt.
        let (final_text, verdict) = match finalize_attempt(
            &self.base_prompt,
            &self.think_text(),
            self.backend,
            self.cfg,
            &self.verdict_markers,
            &self.finalize_request(attempt),
        ) {
            Ok(snapshot) => snapshot,
            Err(e) if e.is_context_overflow() => {
                self.overflowed = true;
                return Ok(self.record(attempt, String::new(), Verdict::Unparseable));
            }
            Err(source) => {
                return Err(EpisodeError {
                    attempt,
                    phase: "finalize",
                    source,
                })
            }
        };
        Ok(self.record(attempt, final_text, verdict))
    }
}

/// Obtain the verdict snapshot for an attempt: request a short completion
/// past the end-of-think marker and extract the verdict from it. An empty
/// completion is unparseable.
pub fn finalize_attempt(
    base_prompt: &str,
    accumulated_think: &str,
    backend: &dyn CompletionBackend,
    cfg: &ForcingConfig,
    markers: &MarkerConfig,
    request: &CompletionRequest,
) -> Result<(String, Verdict), BackendError> {
    let finalize_tail = format!("{}{}", cfg.markers.think_close, cfg.finalize_suffix);
    let response = continue_with(
        backend,
        base_prompt,
        accumulated_think,
        &finalize_tail,
        request,
    )?;
    let verdict = if response.text.is_empty() {
        Verdict::Unparseable
    } else {
        extract_verdict(&response.text, markers)
    };
    Ok((response.text, verdict))
}

/// Run a full episode: `budget` attempts with exactly `budget - 1`
/// injections. Backend failures surface as a partial episode carrying the
/// attempts completed so far.
pub fn run_stts(
    instance: &PreferenceInstance,
    prompt: &JudgePrompt,
    backend: &dyn CompletionBackend,
    cfg: &ForcingConfig,
    lexicon: &ReflectiveLexicon,
) -> EpisodeOutcome {
    let mut runner = EpisodeRunner::new(instance, prompt, backend, cfg, lexicon);
    let mut records = Vec::with_capacity(cfg.budget as usize);
    for _ in 0..cfg.budget {
        match runner.step() {
            Ok(record) => records.push(record),
            Err(error) => {
                return EpisodeOutcome {
                    instance_id: instance.id.clone(),
                    records,
                    error: Some(error),
                }
            }
        }
    }
    EpisodeOutcome {
        instance_id: instance.id.clone(),
        records,
        error: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScriptEntry, ScriptedBackend};
    use crate::prompt::TemplateSpec;

    fn instance(id: &str) -> PreferenceInstance {
        PreferenceInstance::new(id, "q", "x", "y", 0, "t").unwrap()
    }

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

    fn entry_with_tokens(
        id: &str,
        attempt: u32,
        think: &str,
        tokens: u64,
        final_text: &str,
    ) -> ScriptEntry {
        let mut e = entry(id, attempt, think, final_text);
        e.think_tokens = Some(tokens);
        e
    }

    fn run(
        backend: &ScriptedBackend,
        id: &str,
        budget: u32,
    ) -> EpisodeOutcome {
        let cfg = ForcingConfig {
            budget,
            ..ForcingConfig::default()
        };
        let lexicon = ReflectiveLexicon::default();
        let inst = instance(id);
        let prompt = TemplateSpec::default().render(&inst);
        run_stts(&inst, &prompt, backend, &cfg, &lexicon)
    }

    #[test]
    fn verdicts_snapshot_per_attempt() {
        let backend = ScriptedBackend::new([
            entry("i1", 1, "first pass</think>", "I pick [[B]]"),
            entry("i1", 2, " second pass</think>", "changed to [[A]]"),
        ])
        .unwrap();
        let outcome = run(&backend, "i1", 2);
        assert!(outcome.error.is_none());
        assert_eq!(outcome.records.len(), 2);
        assert_eq!(outcome.records[0].attempt_index, 1);
        assert_eq!(outcome.records[0].verdict, Verdict::B);
        assert_eq!(outcome.records[1].attempt_index, 2);
        assert_eq!(outcome.records[1].verdict, Verdict::A);
    }

    #[test]
    fn budget_one_sends_no_injection() {
        let backend =
            ScriptedBackend::new([entry("i1", 1, "only pass</think>", "[[A]]")]).unwrap();
        let outcome = run(&backend, "i1", 1);
        assert_eq!(outcome.records.len(), 1);
        for request in backend.transcript() {
            assert!(!request.prompt.contains(" Wait,"));
        }
    }

    #[test]
    fn exactly_budget_minus_one_injections_on_the_wire() {
        let backend = ScriptedBackend::new([
            entry("i1", 1, "a</think>", "[[A]]"),
            entry("i1", 2, " b</think>", "[[A]]"),
            entry("i1", 3, " c</think>", "[[A]]"),
            entry("i1", 4, " d</think>", "[[A]]"),
        ])
        .unwrap();
        let outcome = run(&backend, "i1", 4);
        assert!(outcome.is_complete(4));
        let injections = backend
            .transcript()
            .iter()
            .filter(|request| request.prompt.ends_with(" Wait,"))
            .count();
        assert_eq!(injections, 3);
    }

    #[test]
    fn think_texts_are_prefix_consistent() {
        let backend = ScriptedBackend::new([
            entry("i1", 1, "a</think>", "[[A]]"),
            entry("i1", 2, " b</think>", "[[B]]"),
            entry("i1", 3, " c</think>", "[[A]]"),
        ])
        .unwrap();
        let outcome = run(&backend, "i1", 3);
        let think = |record: &AttemptRecord| record.trace.think_segments.join(" Wait,");
        for pair in outcome.records.windows(2) {
            let shorter = think(&pair[0]);
            let longer = think(&pair[1]);
            assert!(longer.starts_with(&shorter));
            assert!(longer.len() > shorter.len());
        }
    }

    #[test]
    fn cumulative_tokens_sum_the_script() {
        let backend = ScriptedBackend::new([
            entry_with_tokens("i1", 1, "a</think>", 100, "[[A]]"),
            entry_with_tokens("i1", 2, " b</think>", 40, "[[A]]"),
            entry_with_tokens("i1", 3, " c</think>", 40, "[[A]]"),
            entry_with_tokens("i1", 4, " d</think>", 40, "[[A]]"),
        ])
        .unwrap();
        let outcome = run(&backend, "i1", 4);
        let cumulative: Vec<u64> = outcome
            .records
            .iter()
            .map(|record| record.cumulative_tokens)
            .collect();
        assert_eq!(cumulative, vec![100, 140, 180, 220]);
    }

    #[test]
    fn empty_finalization_is_unparseable() {
        let backend = ScriptedBackend::new([entry("i1", 1, "hmm</think>", "")]).unwrap();
        let outcome = run(&backend, "i1", 1);
        assert_eq!(outcome.records[0].verdict, Verdict::Unparseable);
    }

    #[test]
    fn both_markers_last_one_wins() {
        let backend =
            ScriptedBackend::new([entry("i1", 1, "x</think>", "[[A]] … actually [[B]]")])
                .unwrap();
        let outcome = run(&backend, "i1", 1);
        assert_eq!(outcome.records[0].verdict, Verdict::B);
    }

    #[test]
    fn transport_failure_surfaces_partial_episode() {
        let mut failing = entry("i1", 2, "", "");
        failing.error = Some(crate::backend::ScriptedFailure::Transport);
        let backend =
            ScriptedBackend::new([entry("i1", 1, "a</think>", "[[A]]"), failing]).unwrap();
        let outcome = run(&backend, "i1", 3);
        assert_eq!(outcome.records.len(), 1);
        let error = outcome.error.expect("episode error");
        assert_eq!(error.attempt, 2);
    }

    #[test]
    fn context_overflow_marks_remaining_attempts() {
        let mut overflowing = entry("i1", 3, "", "");
        overflowing.error = Some(crate::backend::ScriptedFailure::ContextLength);
        let backend = ScriptedBackend::new([
            entry("i1", 1, "a</think>", "[[A]]"),
            entry("i1", 2, " b</think>", "[[B]]"),
            overflowing,
        ])
        .unwrap();
        let outcome = run(&backend, "i1", 4);
        assert!(outcome.error.is_none());
        assert_eq!(outcome.records.len(), 4);
        assert_eq!(outcome.records[1].verdict, Verdict::B);
        assert!(!outcome.records[1].overflow);
        for record in &outcome.records[2..] {
            assert_eq!(record.verdict, Verdict::Unparseable);
            assert!(record.overflow);
        }
        // cumulative tokens freeze at the overflow point
        assert_eq!(
            outcome.records[2].cumulative_tokens,
            outcome.records[1].cumulative_tokens
        );
    }

    #[test]
    fn injected_tokens_show_up_in_reflective_counts() {
        let backend = ScriptedBackend::new([
            entry("i1", 1, "clean reasoning</think>", "[[A]]"),
            entry("i1", 2, " more reasoning</think>", "[[A]]"),
            entry("i1", 3, " final reasoning</think>", "[[A]]"),
        ])
        .unwrap();
        let outcome = run(&backend, "i1", 3);
        assert_eq!(outcome.records[0].reflective_counts["Wait"], 0);
        assert_eq!(outcome.records[1].reflective_counts["Wait"], 1);
        assert_eq!(outcome.records[2].reflective_counts["Wait"], 2);
    }

    #[test]
    fn unterminated_think_is_recorded() {
        // No close marker in the script and a tight token budget: the
        // segment ends at max_tokens and the block never closes.
        let mut unterminated = entry("i1", 1, "really long reasoning with many words", "[[A]]");
        unterminated.think_tokens = None;
        let backend = ScriptedBackend::new([unterminated]).unwrap();
        let cfg = ForcingConfig {
            budget: 1,
            segment_max_tokens: 3,
            ..ForcingConfig::default()
        };
        let lexicon = ReflectiveLexicon::default();
        let inst = instance("i1");
        let prompt = TemplateSpec::default().render(&inst);
        let outcome = run_stts(&inst, &prompt, &backend, &cfg, &lexicon);
        assert_eq!(outcome.records[0].trace.status, TraceStatus::Unterminated);
        assert_eq!(outcome.records[0].cumulative_tokens, 3);
    }

    #[test]
    fn empty_injection_with_immediate_close_is_a_no_op() {
        // Degenerate forcing: no injection and a backend that re-emits the
        // close marker right away leaves every later verdict equal to the
        // first. Config validation forbids this combination for real runs;
        // the engine is built directly here to check the semantics.
        let mut entries = vec![entry("i1", 1, "initial thoughts</think>", "[[B]]")];
        for attempt in 2..=3 {
            entries.push(entry("i1", attempt, "</think>", "[[B]]"));
        }
        let backend = ScriptedBackend::new(entries).unwrap();
        let cfg = ForcingConfig {
            budget: 3,
            injection: String::new(),
            ..ForcingConfig::default()
        };
        let lexicon = ReflectiveLexicon::default();
        let inst = instance("i1");
        let prompt = TemplateSpec::default().render(&inst);
        let outcome = run_stts(&inst, &prompt, &backend, &cfg, &lexicon);
        assert!(outcome.is_complete(3));
        for record in &outcome.records {
            assert_eq!(record.verdict, outcome.records[0].verdict);
        }
    }

    #[test]
    fn config_validation() {
        assert!(ForcingConfig::default().validate().is_ok());
        let zero = ForcingConfig {
            budget: 0,
            ..ForcingConfig::default()
        };
        assert!(matches!(
            zero.validate(),
            Err(ForcingConfigError::ZeroBudget)
        ));
        let empty = ForcingConfig {
            budget: 2,
            injection: String::new(),
            ..ForcingConfig::default()
        };
        assert!(matches!(
            empty.validate(),
            Err(ForcingConfigError::EmptyInjection)
        ));
    }
}
