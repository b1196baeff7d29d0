//! Post-hoc analytics over attempt logs: decision-change transitions,
//! reflective-frequency tables, length distributions, and accuracy
//! conditioned on reflection.
//!
//! Everything here is a pure function of the log, so rerunning an analysis
//! always yields identical outputs. Reflection analytics read each
//! instance's attempt-1 record (the un-forced generation); length
//! statistics read the final attempt (the full trajectory).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{verdict_to_label, AttemptRecord};
use crate::trace::{total_reflective, ReflectiveLexicon};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("bins must start at 0 and strictly increase, got {0:?}")]
    InvalidBins(Vec<u64>),
    #[error("log is empty")]
    EmptyLog,
}

/// The three per-attempt states an instance can be in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeState {
    Correct,
    Incorrect,
    Unparseable,
}

impl JudgeState {
    pub const ALL: [JudgeState; 3] = [
        JudgeState::Correct,
        JudgeState::Incorrect,
        JudgeState::Unparseable,
    ];

    pub fn index(self) -> usize {
        match self {
            JudgeState::Correct => 0,
            JudgeState::Incorrect => 1,
            JudgeState::Unparseable => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            JudgeState::Correct => "correct",
            JudgeState::Incorrect => "incorrect",
            JudgeState::Unparseable => "unparseable",
        }
    }
}

/// Classify one record against the ground-truth label.
pub fn classify(record: &AttemptRecord, label: u8) -> JudgeState {
    match verdict_to_label(record.verdict) {
        None => JudgeState::Unparseable,
        Some(predicted) if predicted == label => JudgeState::Correct,
        Some(_) => JudgeState::Incorrect,
    }
}

/// 3x3 transition counts per adjacent attempt pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionTable {
    pub budget: u32,
    /// `steps[k][from][to]` counts instances moving `from -> to` between
    /// attempts `k + 1` and `k + 2`.
    pub steps: Vec<[[u64; 3]; 3]>,
    /// Instances excluded for missing attempts or labels.
    pub excluded: Vec<String>,
    pub instances_counted: usize,
}

/// Flat edge for Sankey-style visualization.
#[derive(Debug, Clone, Serialize)]
pub struct TransitionEdge {
    pub step: u32,
    pub from_state: &'static str,
    pub to_state: &'static str,
    pub count: u64,
}

impl TransitionTable {
    /// Counts of instances in each state at a given attempt (1-based).
    pub fn state_counts(&self, attempt: u32) -> [u64; 3] {
        let mut counts = [0u64; 3];
        if attempt == 1 {
            if let Some(step) = self.steps.first() {
                for (from, row) in step.iter().enumerate() {
                    counts[from] = row.iter().sum();
                }
            }
        } else if let Some(step) = self.steps.get(attempt as usize - 2) {
            for row in step {
                for (to, &count) in row.iter().enumerate() {
                    counts[to] += count;
                }
            }
        }
        counts
    }

    pub fn edges(&self) -> Vec<TransitionEdge> {
        let mut edges = Vec::new();
        for (step_index, step) in self.steps.iter().enumerate() {
            for from in JudgeState::ALL {
                for to in JudgeState::ALL {
                    edges.push(TransitionEdge {
                        step: step_index as u32 + 1,
                        from_state: from.name(),
                        to_state: to.name(),
                        count: step[from.index()][to.index()],
                    });
                }
            }
        }
        edges
    }

    /// CSV form of [`edges`](Self::edges): `step,from_state,to_state,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,from_state,to_state,count\n");
        for edge in self.edges() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                edge.step, edge.from_state, edge.to_state, edge.count
            ));
        }
        out
    }
}

/// Group records per instance, sorted by attempt index.
fn by_instance(records: &[AttemptRecord]) -> BTreeMap<&str, Vec<&AttemptRecord>> {
    let mut map: BTreeMap<&str, Vec<&AttemptRecord>> = BTreeMap::new();
    for record in records {
        map.entry(record.instance_id.as_str()).or_default().push(record);
    }
    for attempts in map.values_mut() {
        attempts.sort_by_key(|r| r.attempt_index);
    }
    map
}

fn has_attempts(attempts: &[&AttemptRecord], budget: u32) -> bool {
    attempts.len() == budget as usize
        && attempts
            .iter()
            .enumerate()
            .all(|(i, r)| r.attempt_index == i as u32 + 1)
}

/// Count decision changes between adjacent attempts. Instances missing any
/// attempt in `1..=budget`, or without a label, are excluded and reported.
pub fn transitions(
    records: &[AttemptRecord],
    labels: &BTreeMap<String, u8>,
    budget: u32,
) -> TransitionTable {
    let mut steps = vec![[[0u64; 3]; 3]; budget.saturating_sub(1) as usize];
    let mut excluded = Vec::new();
    let mut instances_counted = 0usize;

    for (id, attempts) in by_instance(records) {
        let Some(&label) = labels.get(id) else {
            excluded.push(id.to_string());
            continue;
        };
        if !has_attempts(&attempts, budget) {
            excluded.push(id.to_string());
            continue;
        }
        instances_counted += 1;
        for (step, pair) in attempts.windows(2).enumerate() {
            let from = classify(pair[0], label);
            let to = classify(pair[1], label);
            steps[step][from.index()][to.index()] += 1;
        }
    }

    TransitionTable {
        budget,
        steps,
        excluded,
        instances_counted,
    }
}

/// Reflective-count bins: `edges = [0, 1, 5]` means `{0}`, `1-4`, `>=5`.
/// The first edge must be 0 and the last bin is always open-ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountBins {
    edges: Vec<u64>,
}

impl CountBins {
    pub fn new(edges: Vec<u64>) -> Result<Self, AnalysisError> {
        if edges.first() != Some(&0) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AnalysisError::InvalidBins(edges));
        }
        Ok(Self { edges })
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn index_of(&self, count: u64) -> usize {
        match self.edges.binary_search(&count) {
            Ok(i) => i,
            Err(i) => i - 1, // first edge is 0, so i >= 1 here
        }
    }

    pub fn labels(&self) -> Vec<String> {
        let mut labels = Vec::with_capacity(self.edges.len());
        for (i, &edge) in self.edges.iter().enumerate() {
            match self.edges.get(i + 1) {
                None => labels.push(format!(">={edge}")),
                Some(&next) if next == edge + 1 => labels.push(format!("{edge}")),
                Some(&next) => labels.push(format!("{edge}-{}", next - 1)),
            }
        }
        labels
    }
}

impl Default for CountBins {
    fn default() -> Self {
        Self {
            edges: vec![0, 1, 2, 3, 4, 5, 10, 20],
        }
    }
}

/// Share of instances per reflective-count bin, split by attempt-1
/// correctness (unparseable counts with the incorrect split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectiveFrequencyTable {
    pub bin_labels: Vec<String>,
    pub correct: Vec<f64>,
    pub incorrect: Vec<f64>,
    pub correct_total: usize,
    pub incorrect_total: usize,
}

impl ReflectiveFrequencyTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,correct_fraction,incorrect_fraction\n");
        for (i, label) in self.bin_labels.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", label, self.correct[i], self.incorrect[i]));
        }
        out
    }
}

fn attempt_one_reflection(
    records: &[AttemptRecord],
    labels: &BTreeMap<String, u8>,
    lexicon: &ReflectiveLexicon,
) -> Vec<(u64, JudgeState)> {
    let mut out = Vec::new();
    for (id, attempts) in by_instance(records) {
        let Some(&label) = labels.get(id) else {
            continue;
        };
        let Some(first) = attempts.iter().find(|r| r.attempt_index == 1) else {
            continue;
        };
        let text = first.trace.think_segments.join(" ");
        out.push((total_reflective(&text, lexicon), classify(first, label)));
    }
    out
}

/// Distribution of total reflective counts in attempt-1 traces, split by
/// correctness. Fractions within each split sum to 1 when the split is
/// non-empty; an empty log yields an all-zero table.
pub fn reflective_frequency_table(
    records: &[AttemptRecord],
    labels: &BTreeMap<String, u8>,
    lexicon: &ReflectiveLexicon,
    bins: &CountBins,
) -> ReflectiveFrequencyTable {
    let mut correct_counts = vec![0usize; bins.len()];
    let mut incorrect_counts = vec![0usize; bins.len()];
    for (total, state) in attempt_one_reflection(records, labels, lexicon) {
        let bin = bins.index_of(total);
        match state {
            JudgeState::Correct => correct_counts[bin] += 1,
            _ => incorrect_counts[bin] += 1,
        }
    }
    let correct_total: usize = correct_counts.iter().sum();
    let incorrect_total: usize = incorrect_counts.iter().sum();
    let normalize = |counts: Vec<usize>, total: usize| -> Vec<f64> {
        counts
            .into_iter()
            .map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    };
    ReflectiveFrequencyTable {
        bin_labels: bins.labels(),
        correct: normalize(correct_counts, correct_total),
        incorrect: normalize(incorrect_counts, incorrect_total),
        correct_total,
        incorrect_total,
    }
}

/// Accuracy restricted to instances whose attempt-1 trace falls in each
/// reflective-count bin; empty bins are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyByReflection {
    pub bin_labels: Vec<String>,
    pub accuracy: Vec<Option<f64>>,
    pub instances: Vec<usize>,
}

impl AccuracyByReflection {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,accuracy,instances\n");
        for (i, label) in self.bin_labels.iter().enumerate() {
            let acc = match self.accuracy[i] {
                Some(a) => a.to_string(),
                None => String::new(),
            };
            out.push_str(&format!("{},{},{}\n", label, acc, self.instances[i]));
        }
        out
    }
}

pub fn accuracy_by_reflection(
    records: &[AttemptRecord],
    labels: &BTreeMap<String, u8>,
    lexicon: &ReflectiveLexicon,
    bins: &CountBins,
) -> AccuracyByReflection {
    let mut correct = vec![0usize; bins.len()];
    let mut totals = vec![0usize; bins.len()];
    for (total, state) in attempt_one_reflection(records, labels, lexicon) {
        let bin = bins.index_of(total);
        totals[bin] += 1;
        if state == JudgeState::Correct {
            correct[bin] += 1;
        }
    }
    let accuracy = correct
        .iter()
        .zip(&totals)
        .map(|(&c, &n)| if n == 0 { None } else { Some(c as f64 / n as f64) })
        .collect();
    AccuracyByReflection {
        bin_labels: bins.labels(),
        accuracy,
        instances: totals,
    }
}

/// Summary of one correctness split: nearest-rank percentiles over the
/// final-attempt token counts plus a fixed-width histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub count: usize,
    pub mean: f64,
    pub median: u64,
    pub p95: u64,
    pub histogram: Vec<HistogramBin>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub start: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub bin_width: u64,
    pub correct: Option<SplitSummary>,
    pub incorrect: Option<SplitSummary>,
}

impl LengthStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,count,mean,median,p95\n");
        for (name, split) in [("correct", &self.correct), ("incorrect", &self.incorrect)] {
            if let Some(summary) = split {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    name, summary.count, summary.mean, summary.median, summary.p95
                ));
            }
        }
        out
    }
}

/// Nearest-rank percentile: the value at rank `ceil(p/100 * n)` (1-based)
/// of the sorted data.
pub fn nearest_rank(sorted: &[u64], percentile: f64) -> u64 {
    debug_assert!(!sorted.is_empty());
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn summarize(mut values: Vec<u64>, bin_width: u64) -> Option<SplitSummary> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let count = values.len();
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / count as f64;
    let median = nearest_rank(&values, 50.0);
    let p95 = nearest_rank(&values, 95.0);
    let mut buckets: BTreeMap<u64, u64> = BTreeMap::new();
    for &value in &values {
        *buckets.entry(value / bin_width * bin_width).or_default() += 1;
    }
    let histogram = buckets
        .into_iter()
        .map(|(start, count)| HistogramBin { start, count })
        .collect();
    Some(SplitSummary {
        count,
        mean,
        median,
        p95,
        histogram,
    })
}

/// Token-count distribution of full trajectories (each instance's final
/// attempt), split by final-attempt correctness.
pub fn length_stats(
    records: &[AttemptRecord],
    labels: &BTreeMap<String, u8>,
    bin_width: u64,
) -> LengthStats {
    let bin_width = bin_width.max(1);
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for (id, attempts) in by_instance(records) {
        let Some(&label) = labels.get(id) else {
            continue;
        };
        let Some(last) = attempts.last() else {
            continue;
        };
        match classify(last, label) {
            JudgeState::Correct => correct.push(last.cumulative_tokens),
            _ => incorrect.push(last.cumulative_tokens),
        }
    }
    LengthStats {
        bin_width,
        correct: summarize(correct, bin_width),
        incorrect: summarize(incorrect, bin_width),
    }
}

/// Word-frequency table over think text (final attempt per instance):
/// lowercase alphabetic tokens, stopwords removed.
pub fn word_frequency(
    records: &[AttemptRecord],
    stopwords: &BTreeSet<String>,
) -> BTreeMap<String, u64> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for (_, attempts) in by_instance(records) {
        let Some(last) = attempts.last() else {
            continue;
        };
        for segment in &last.trace.think_segments {
            let mut word = String::new();
            for c in segment.chars().chain(std::iter::once(' ')) {
                if c.is_alphabetic() {
                    word.extend(c.to_lowercase());
                } else if !word.is_empty() {
                    if !stopwords.contains(&word) {
                        *counts.entry(std::mem::take(&mut word)).or_default() += 1;
                    } else {
                        word.clear();
                    }
                }
            }
        }
    }
    counts
}

/// A small default stopword list for the word-frequency table.
pub fn default_stopwords() -> BTreeSet<String> {
    [
        "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "have", "in",
        "is", "it", "its", "of", "on", "or", "that", "the", "this", "to", "was", "we", "were",
        "which", "with", "i", "so", "not", "more", "both", "than", "then", "but",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}
