//! Parse raw generations into reasoning traces, extract verdicts, and count
//! reflective phrases.
//!
//! All functions here are pure and total: malformed input degrades to the
//! unterminated or marker-free cases instead of erroring.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ReasoningTrace, TraceStatus, Verdict};

/// Marker strings that structure a generation: the think-block delimiters
/// and the two verdict markers the judge is instructed to emit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerConfig {
    pub think_open: String,
    pub think_close: String,
    pub verdict_pattern_a: String,
    pub verdict_pattern_b: String,
}

impl Default for MarkerConfig {
    fn default() -> Self {
        Self {
            think_open: "<think>".into(),
            think_close: "</think>".into(),
            verdict_pattern_a: "[[A]]".into(),
            verdict_pattern_b: "[[B]]".into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum MarkerError {
    #[error("marker `{0}` must be non-empty")]
    Empty(&'static str),
    #[error("markers must be pairwise distinct (duplicate: `{0}`)")]
    Duplicate(String),
}

impl MarkerConfig {
    pub fn validate(&self) -> Result<(), MarkerError> {
        let named = [
            (&self.think_open, "think_open"),
            (&self.think_close, "think_close"),
            (&self.verdict_pattern_a, "verdict_pattern_a"),
            (&self.verdict_pattern_b, "verdict_pattern_b"),
        ];
        for (value, name) in &named {
            if value.is_empty() {
                return Err(MarkerError::Empty(name));
            }
        }
        for i in 0..named.len() {
            for j in (i + 1)..named.len() {
                if named[i].0 == named[j].0 {
                    return Err(MarkerError::Duplicate(named[i].0.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Split a raw generation into a reasoning trace.
///
/// Text between `think_open` and the first subsequent `think_close` becomes
/// the think segment and the text after `think_close` becomes the final
/// text. If the block never closes the trace is `Unterminated` with empty
/// final text; if there is no think block at all the whole input is the
/// final text. Any text before `think_open` is dropped (generations are
/// expected to start at or inside the think block).
pub fn segment_trace(raw: &str, markers: &MarkerConfig) -> ReasoningTrace {
    match raw.find(&markers.think_open) {
        None => ReasoningTrace {
            think_segments: Vec::new(),
            final_text: raw.to_string(),
            status: TraceStatus::Closed,
            token_count: 0,
        },
        Some(open_at) => {
            let body = &raw[open_at + markers.think_open.len()..];
            match body.find(&markers.think_close) {
                Some(close_at) => ReasoningTrace {
                    think_segments: vec![body[..close_at].to_string()],
                    final_text: body[close_at + markers.think_close.len()..].to_string(),
                    status: TraceStatus::Closed,
                    token_count: 0,
                },
                None => ReasoningTrace {
                    think_segments: vec![body.to_string()],
                    final_text: String::new(),
                    status: TraceStatus::Unterminated,
                    token_count: 0,
                },
            }
        }
    }
}

/// Extract the verdict from a final answer: the candidate whose marker
/// occurs last wins, since reflection may revise an earlier statement.
/// Returns `Unparseable` when neither marker occurs.
pub fn extract_verdict(final_text: &str, markers: &MarkerConfig) -> Verdict {
    let a = final_text.rfind(&markers.verdict_pattern_a);
    let b = final_text.rfind(&markers.verdict_pattern_b);
    match (a, b) {
        (None, None) => Verdict::Unparseable,
        (Some(_), None) => Verdict::A,
        (None, Some(_)) => Verdict::B,
        (Some(pa), Some(pb)) => {
            if pa == pb {
                // One marker is a prefix of the other at the same spot; the
                // longer literal is the actual emission.
                if markers.verdict_pattern_a.len() >= markers.verdict_pattern_b.len() {
                    Verdict::A
                } else {
                    Verdict::B
                }
            } else if pa > pb {
                Verdict::A
            } else {
                Verdict::B
            }
        }
    }
}

/// The fixed phrase set used to quantify reflection in reasoning traces.
///
/// Phrases are kept in the order given; matching always tries longer
/// phrases first so that "On the other hand" is never counted as a bare
/// "On the contrary" prefix or similar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectiveLexicon {
    phrases: Vec<String>,
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon is empty")]
    Empty,
    #[error("lexicon contains an empty phrase")]
    EmptyPhrase,
    #[error("failed to read lexicon file: {0}")]
    Io(#[from] std::io::Error),
}

impl Default for ReflectiveLexicon {
    fn default() -> Self {
        Self {
            phrases: [
                "Wait",
                "Alternatively",
                "But",
                "However",
                "Hold on",
                "On the other hand",
                "On the contrary",
                "In contrast",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        }
    }
}

impl ReflectiveLexicon {
    pub fn new(phrases: Vec<String>) -> Result<Self, LexiconError> {
        if phrases.is_empty() {
            return Err(LexiconError::Empty);
        }
        if phrases.iter().any(|p| p.is_empty()) {
            return Err(LexiconError::EmptyPhrase);
        }
        Ok(Self { phrases })
    }

    /// Load an override lexicon: plain UTF-8 text, one phrase per line.
    /// Blank lines are skipped.
    pub fn from_file(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path)?;
        let phrases: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|line| !line.is_empty())
            .map(String::from)
            .collect();
        Self::new(phrases)
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    /// Indices into `phrases` ordered longest-first (stable within a length).
    fn match_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.phrases.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(self.phrases[i].chars().count()));
        order
    }
}

/// Count occurrences of each lexicon phrase in `text`.
///
/// Matching is case-insensitive (ASCII fold), requires word boundaries
/// (a boundary is a transition between alphabetic and non-alphabetic
/// characters), tries longer phrases first, and never lets a character
/// position contribute to more than one match. Every lexicon phrase is
/// present in the result, zero-count phrases included.
pub fn count_reflective(text: &str, lexicon: &ReflectiveLexicon) -> BTreeMap<String, u64> {
    let mut counts: BTreeMap<String, u64> = lexicon
        .phrases()
        .iter()
        .map(|p| (p.clone(), 0u64))
        .collect();
    let chars: Vec<char> = text.chars().collect();
    let phrase_chars: Vec<Vec<char>> = lexicon
        .phrases()
        .iter()
        .map(|p| p.chars().collect())
        .collect();
    let order = lexicon.match_order();

    let mut i = 0;
    while i < chars.len() {
        let start_ok = i == 0 || !chars[i - 1].is_alphabetic();
        let mut advanced = false;
        if start_ok {
            for &pi in &order {
                let phrase = &phrase_chars[pi];
                if matches_at(&chars, i, phrase) {
                    *counts.get_mut(&lexicon.phrases()[pi]).expect("known key") += 1;
                    i += phrase.len();
                    advanced = true;
                    break;
                }
            }
        }
        if !advanced {
            i += 1;
        }
    }
    counts
}

/// Sum of all per-phrase counts.
pub fn total_reflective(text: &str, lexicon: &ReflectiveLexicon) -> u64 {
    count_reflective(text, lexicon).values().sum()
}

fn matches_at(chars: &[char], at: usize, phrase: &[char]) -> bool {
    if at + phrase.len() > chars.len() {
        return false;
    }
    for (offset, &expected) in phrase.iter().enumerate() {
        if !chars[at + offset].eq_ignore_ascii_case(&expected) {
            return false;
        }
    }
    // Word boundary on both ends when the phrase edge is alphabetic.
    if phrase.first().is_some_and(|c| c.is_alphabetic()) && at > 0 && chars[at - 1].is_alphabetic()
    {
        return false;
    }
    if phrase.last().is_some_and(|c| c.is_alphabetic()) {
        if let Some(&next) = chars.get(at + phrase.len()) {
            if next.is_alphabetic() {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn markers() -> MarkerConfig {
        MarkerConfig::default()
    }

    #[test]
    fn segment_closed_block() {
        let trace = segment_trace("<think>abc</think>ans", &markers());
        assert_eq!(trace.think_segments, vec!["abc"]);
        assert_eq!(trace.final_text, "ans");
        assert_eq!(trace.status, TraceStatus::Closed);
    }

    #[test]
    fn segment_unterminated_block() {
        let trace = segment_trace("<think>abc", &markers());
        assert_eq!(trace.think_segments, vec!["abc"]);
        assert_eq!(trace.final_text, "");
        assert_eq!(trace.status, TraceStatus::Unterminated);
    }

    #[test]
    fn segment_marker_free_input() {
        let trace = segment_trace("plain answer [[A]]", &markers());
        assert!(trace.think_segments.is_empty());
        assert_eq!(trace.final_text, "plain answer [[A]]");
        assert_eq!(trace.status, TraceStatus::Closed);
    }

    #[test]
    fn segment_reassembly_round_trip() {
        let m = markers();
        let raw = format!("{}reasoning here{}final [[B]]", m.think_open, m.think_close);
        let trace = segment_trace(&raw, &m);
        let rebuilt = format!(
            "{}{}{}{}",
            m.think_open, trace.think_segments[0], m.think_close, trace.final_text
        );
        assert_eq!(rebuilt, raw);
    }

    #[test]
    fn verdict_single_marker() {
        assert_eq!(extract_verdict("verdict: [[A]]", &markers()), Verdict::A);
    }

    #[test]
    fn verdict_last_occurrence_wins() {
        assert_eq!(
            extract_verdict("I lean [[A]] but finally [[B]]", &markers()),
            Verdict::B
        );
        assert_eq!(
            extract_verdict("[[B]] hmm, on reflection [[A]]", &markers()),
            Verdict::A
        );
    }

    #[test]
    fn verdict_unparseable_when_no_marker() {
        assert_eq!(extract_verdict("no decision", &markers()), Verdict::Unparseable);
        assert_eq!(extract_verdict("", &markers()), Verdict::Unparseable);
    }

    #[test]
    fn marker_validation() {
        assert!(markers().validate().is_ok());
        let mut bad = markers();
        bad.think_close.clear();
        assert!(matches!(bad.validate(), Err(MarkerError::Empty(_))));
        let mut dup = markers();
        dup.verdict_pattern_b = dup.verdict_pattern_a.clone();
        assert!(matches!(dup.validate(), Err(MarkerError::Duplicate(_))));
    }

    #[test]
    fn count_basic() {
        let lex = ReflectiveLexicon::default();
        let counts = count_reflective("Wait, wait. However", &lex);
        assert_eq!(counts["Wait"], 2);
        assert_eq!(counts["However"], 1);
        assert_eq!(counts["But"], 0);
        assert_eq!(counts.len(), lex.phrases().len());
    }

    #[test]
    fn count_longest_phrase_first() {
        let lex = ReflectiveLexicon::default();
        let counts = count_reflective("On the other hand, but...", &lex);
        assert_eq!(counts["On the other hand"], 1);
        assert_eq!(counts["But"], 1);
        assert_eq!(counts["On the contrary"], 0);
    }

    #[test]
    fn count_respects_word_boundaries() {
        let lex = ReflectiveLexicon::default();
        let counts = count_reflective("butter butted rebut", &lex);
        assert!(counts.values().all(|&c| c == 0));
    }

    #[test]
    fn count_is_case_insensitive() {
        let lex = ReflectiveLexicon::default();
        assert_eq!(
            total_reflective("WAIT but HOWEVER", &lex),
            total_reflective("wait BUT however", &lex)
        );
        assert_eq!(total_reflective("WAIT but HOWEVER", &lex), 3);
    }

    #[test]
    fn no_double_counting_of_positions() {
        // "In contrast" consumes its characters; the trailing "but" is a
        // separate match, and nothing inside the phrase is recounted.
        let lex = ReflectiveLexicon::default();
        let counts = count_reflective("In contrast but", &lex);
        assert_eq!(counts["In contrast"], 1);
        assert_eq!(counts["But"], 1);
        assert_eq!(counts.values().sum::<u64>(), 2);
    }

    #[test]
    fn default_lexicon_matches_published_list() {
        let expected = [
            "Wait",
            "Alternatively",
            "But",
            "However",
            "Hold on",
            "On the other hand",
            "On the contrary",
            "In contrast",
        ];
        assert_eq!(ReflectiveLexicon::default().phrases(), &expected);
    }

    #[test]
    fn lexicon_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lex.txt");
        std::fs::write(&path, "Hmm\nActually\n\n  Rethink  \n").unwrap();
        let lex = ReflectiveLexicon::from_file(&path).unwrap();
        assert_eq!(lex.phrases(), &["Hmm", "Actually", "Rethink"]);
        assert_eq!(total_reflective("hmm... actually, rethink", &lex), 3);
    }

    #[test]
    fn lexicon_rejects_empty() {
        assert!(matches!(
            ReflectiveLexicon::new(vec![]),
            Err(LexiconError::Empty)
        ));
        assert!(matches!(
            ReflectiveLexicon::new(vec!["ok".into(), String::new()]),
            Err(LexiconError::EmptyPhrase)
        ));
    }
}
