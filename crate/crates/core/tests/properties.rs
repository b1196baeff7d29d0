//! Property tests for the invariants the harness leans on.

use std::collections::BTreeMap;

use proptest::prelude::*;

use stts_core::analysis::{classify, transitions, JudgeState};
use stts_core::bench::{expand_one_to_many, OneToManyProblem};
use stts_core::evaluate::trend_r;
use stts_core::model::{
    AttemptRecord, PreferenceInstance, ReasoningTrace, TraceStatus, Verdict,
};
use stts_core::prompt::TemplateSpec;
use stts_core::rlmath::{batch_normalize, RlError};
use stts_core::trace::{
    count_reflective, extract_verdict, segment_trace, total_reflective, MarkerConfig,
    ReflectiveLexicon,
};

fn record(id: &str, attempt: u32, verdict: Verdict, tokens: u64) -> AttemptRecord {
    let mut reflective_counts = BTreeMap::new();
    reflective_counts.insert("Wait".to_string(), 1);
    AttemptRecord {
        instance_id: id.into(),
        attempt_index: attempt,
        trace: ReasoningTrace {
            think_segments: vec![format!("{id} thoughts {attempt}")],
            final_text: "done".into(),
            status: TraceStatus::Closed,
            token_count: tokens,
        },
        verdict,
        cumulative_tokens: tokens,
        reflective_counts,
        overflow: false,
    }
}

fn verdict_strategy() -> impl Strategy<Value = Verdict> {
    prop_oneof![
        Just(Verdict::A),
        Just(Verdict::B),
        Just(Verdict::Unparseable)
    ]
}

/// Words that never form part of a multi-word lexicon phrase, so matches
/// cannot straddle a concatenation boundary.
fn neutral_words() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec![
            "wait",
            "but",
            "however",
            "alternatively",
            "alpha",
            "beta",
            "gamma",
            "delta",
            "check",
            "answer",
        ]),
        0..12,
    )
    .prop_map(|words| words.join(" "))
}

proptest! {
    #[test]
    fn attempt_record_serde_round_trip(
        id in "[a-z][a-z0-9]{0,8}",
        attempt in 1u32..6,
        verdict in verdict_strategy(),
        tokens in 0u64..100_000,
        overflow in any::<bool>(),
        segments in prop::collection::vec(".{0,40}", 1..4),
        final_text in ".{0,40}",
    ) {
        let mut reflective_counts = BTreeMap::new();
        reflective_counts.insert("Wait".to_string(), tokens % 7);
        let record = AttemptRecord {
            instance_id: id,
            attempt_index: attempt,
            trace: ReasoningTrace {
                think_segments: segments,
                final_text,
                status: if overflow { TraceStatus::Unterminated } else { TraceStatus::Closed },
                token_count: tokens,
            },
            verdict,
            cumulative_tokens: tokens,
            reflective_counts,
            overflow,
        };
        let line = serde_json::to_string(&record).unwrap();
        let back: AttemptRecord = serde_json::from_str(&line).unwrap();
        prop_assert_eq!(back, record);
    }

    #[test]
    fn preference_instance_serde_round_trip(
        id in "[a-z0-9#_-]{1,12}",
        query in ".{1,30}",
        a in ".{1,30}",
        b in ".{1,30}",
        label in 0u8..2,
    ) {
        let instance = PreferenceInstance::new(id, query, a, b, label, "tag").unwrap();
        let json = serde_json::to_string(&instance).unwrap();
        let back: PreferenceInstance = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, instance);
    }

    #[test]
    fn reflective_counting_is_additive_over_concatenation(
        left in neutral_words(),
        right in neutral_words(),
    ) {
        let lexicon = ReflectiveLexicon::default();
        let joined = format!("{left} {right}");
        let mut expected = count_reflective(&left, &lexicon);
        for (phrase, count) in count_reflective(&right, &lexicon) {
            *expected.get_mut(&phrase).unwrap() += count;
        }
        prop_assert_eq!(count_reflective(&joined, &lexicon), expected);
    }

    #[test]
    fn reflective_total_is_case_invariant(text in neutral_words()) {
        let lexicon = ReflectiveLexicon::default();
        prop_assert_eq!(
            total_reflective(&text.to_uppercase(), &lexicon),
            total_reflective(&text, &lexicon)
        );
    }

    #[test]
    fn one_to_many_expansion_balances_and_validates(
        n_rejected in 1usize..12,
        query in ".{1,20}",
        chosen in ".{1,20}",
    ) {
        let problem = OneToManyProblem {
            id: "p".into(),
            query,
            chosen,
            rejected: (0..n_rejected).map(|i| format!("rejected {i}")).collect(),
        };
        let instances = expand_one_to_many(&problem, "tag").unwrap();
        prop_assert_eq!(instances.len(), n_rejected);
        for instance in &instances {
            prop_assert!(instance.validate().is_ok());
        }
        let ones = instances.iter().filter(|i| i.label == 1).count();
        prop_assert!((n_rejected - ones).abs_diff(ones) <= 1);
    }

    #[test]
    fn transition_tables_conserve_counts(
        states in prop::collection::vec(
            prop::collection::vec(verdict_strategy(), 3),
            1..20,
        ),
    ) {
        // Each inner vec is one instance's verdicts over 3 attempts.
        let mut records = Vec::new();
        let mut labels = BTreeMap::new();
        for (i, verdicts) in states.iter().enumerate() {
            let id = format!("i{i}");
            labels.insert(id.clone(), 0u8);
            for (k, &verdict) in verdicts.iter().enumerate() {
                records.push(record(&id, k as u32 + 1, verdict, 1));
            }
        }
        let table = transitions(&records, &labels, 3);
        prop_assert_eq!(table.instances_counted, states.len());
        let n = states.len() as u64;
        for step in &table.steps {
            let total: u64 = step.iter().flatten().sum();
            prop_assert_eq!(total, n);
        }
        // outgoing counts at attempt k+1 equal incoming counts from step k
        for attempt in 1..=3u32 {
            prop_assert_eq!(table.state_counts(attempt).iter().sum::<u64>(), n);
        }
    }

    #[test]
    fn batch_normalize_is_mean_zero_std_one(
        values in prop::collection::vec(-100.0f64..100.0, 2..64),
    ) {
        match batch_normalize(&values) {
            Ok(normalized) => {
                let n = normalized.len() as f64;
                let mean = normalized.iter().sum::<f64>() / n;
                let std = (normalized.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((std - 1.0).abs() < 1e-9);
            }
            Err(RlError::DegenerateBatch { .. }) => {} // all-equal draw
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn template_rendering_is_injective(
        q1 in ".{1,20}", a1 in ".{1,20}", b1 in ".{1,20}",
        q2 in ".{1,20}", a2 in ".{1,20}", b2 in ".{1,20}",
    ) {
        prop_assume!((&q1, &a1, &b1) != (&q2, &a2, &b2));
        let template = TemplateSpec::default();
        let first = PreferenceInstance::new("x", q1, a1, b1, 0, "t").unwrap();
        let second = PreferenceInstance::new("y", q2, a2, b2, 0, "t").unwrap();
        prop_assert_ne!(
            template.render(&first).rendered_text,
            template.render(&second).rendered_text
        );
    }

    #[test]
    fn closed_single_segment_traces_reassemble(
        // segment and final text free of the think markers
        segment in "[a-zA-Z0-9 .,!?]{0,60}",
        final_text in "[a-zA-Z0-9 .,!?\\[\\]]{0,60}",
    ) {
        let markers = MarkerConfig::default();
        let raw = format!(
            "{}{}{}{}",
            markers.think_open, segment, markers.think_close, final_text
        );
        let trace = segment_trace(&raw, &markers);
        prop_assert_eq!(trace.think_segments.len(), 1);
        let rebuilt = format!(
            "{}{}{}{}",
            markers.think_open, trace.think_segments[0], markers.think_close, trace.final_text
        );
        prop_assert_eq!(rebuilt, raw);
    }

    #[test]
    fn verdict_extraction_takes_the_last_marker(
        prefix in "[a-z ]{0,30}",
        middle in "[a-z ]{1,30}",
        suffix in "[a-z ]{0,30}",
        first_is_a in any::<bool>(),
    ) {
        let markers = MarkerConfig::default();
        let (first, second) = if first_is_a {
            ("[[A]]", "[[B]]")
        } else {
            ("[[B]]", "[[A]]")
        };
        let text = format!("{prefix}{first}{middle}{second}{suffix}");
        let expected = if second == "[[A]]" { Verdict::A } else { Verdict::B };
        prop_assert_eq!(extract_verdict(&text, &markers), expected);
    }

    #[test]
    fn trend_r_affine_invariance(
        ys in prop::collection::vec(0.0f64..1.0, 2..8),
        scale in 0.01f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let points: Vec<(f64, f64)> = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| ((i + 1) as f64, y))
            .collect();
        let scaled: Vec<(f64, f64)> = points
            .iter()
            .map(|(x, y)| (*x, scale * y + shift))
            .collect();
        let original = trend_r(&points).unwrap();
        let transformed = trend_r(&scaled).unwrap();
        match (original, transformed) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
            (None, None) => {}
            other => prop_assert!(false, "variance mismatch: {other:?}"),
        }
    }
}

#[test]
fn classify_matches_verdict_label_mapping() {
    let correct = record("a", 1, Verdict::A, 1);
    let incorrect = record("a", 1, Verdict::B, 1);
    let unparseable = record("a", 1, Verdict::Unparseable, 1);
    assert_eq!(classify(&correct, 0), JudgeState::Correct);
    assert_eq!(classify(&incorrect, 0), JudgeState::Incorrect);
    assert_eq!(classify(&unparseable, 0), JudgeState::Unparseable);
    assert_eq!(classify(&incorrect, 1), JudgeState::Correct);
}
