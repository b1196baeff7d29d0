//! Run orchestration and scalar metrics: accuracy, headroom-normalized
//! improvement, per-attempt curves, trend correlation, token accounting.
//!
//! Episodes run concurrently up to the configured parallelism; the log
//! writer is the only shared mutable resource and serializes appends, one
//! flushed episode at a time. Aggregation happens after the fact over the
//! completed log, sorted by instance id, so reports are deterministic and
//! independent of completion order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::CompletionBackend;
use crate::forcing::{run_stts, ForcingConfig};
use crate::model::verdict_to_label;
use crate::model::{AttemptCounts, AttemptRecord, EvaluationReport, PreferenceInstance};
use crate::prompt::TemplateSpec;
use crate::trace::ReflectiveLexicon;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no records supplied")]
    NoRecords,
    #[error("trend needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("trend points must have distinct attempt indices")]
    DuplicateIndices,
    #[error("no label known for instance `{0}`")]
    MissingLabel(String),
    #[error("io failure on `{path}`: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("attempt log `{path}` line {line}: {source}")]
    LogParse {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("aborted: {failed} of {total} instances failed (limit fraction {limit})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit: f64,
    },
    #[error(transparent)]
    Forcing(#[from] crate::forcing::ForcingConfigError),
}

/// Orchestration settings for one evaluation run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub forcing: ForcingConfig,
    pub parallelism: usize,
    pub output_dir: PathBuf,
    pub resume: bool,
    /// Abort the run once more than this fraction of instances has failed.
    pub max_failure_fraction: f64,
    pub harness_version: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            forcing: ForcingConfig::default(),
            parallelism: 4,
            output_dir: PathBuf::from("stts-out"),
            resume: false,
            max_failure_fraction: 0.5,
            harness_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Mean over instances of "the verdict at this attempt maps to the label".
/// Unparseable verdicts cannot match and count as incorrect.
pub fn accuracy(
    records: &[&AttemptRecord],
    labels: &BTreeMap<String, u8>,
) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut correct = 0usize;
    for record in records {
        let label = labels
            .get(&record.instance_id)
            .ok_or_else(|| EvalError::MissingLabel(record.instance_id.clone()))?;
        if verdict_to_label(record.verdict) == Some(*label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Improvement normalized by the remaining headroom:
/// `(acc_stts - acc_init) / (1 - acc_init) * 100`.
///
/// Absent when the initial accuracy is already 1 (no headroom left) or
/// outside `[0, 1)`.
pub fn delta_relative(acc_init: f64, acc_stts: f64) -> Option<f64> {
    if !(0.0..1.0).contains(&acc_init) {
        return None;
    }
    Some((acc_stts - acc_init) / (1.0 - acc_init) * 100.0)
}

/// Pearson correlation of attempt index against accuracy; higher means a
/// stronger upward scaling trend. `Ok(None)` when the accuracies have zero
/// variance (the correlation is undefined).
pub fn trend_r(points: &[(f64, f64)]) -> Result<Option<f64>, EvalError> {
    if points.len() < 2 {
        return Err(EvalError::TooFewPoints(points.len()));
    }
    let mut seen = BTreeSet::new();
    for (x, _) in points {
        if !seen.insert(x.to_bits()) {
            return Err(EvalError::DuplicateIndices);
        }
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in points {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

/// Parse an attempt log (JSONL of records).
pub fn read_attempt_log(path: &Path) -> Result<Vec<AttemptRecord>, EvalError> {
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AttemptRecord =
            serde_json::from_str(&line).map_err(|source| EvalError::LogParse {
                path: path.to_path_buf(),
                line: index + 1,
                source,
            })?;
        records.push(record);
    }
    Ok(records)
}

/// Parse an attempt log tolerating malformed lines (an interrupted run can
/// tear its final write). Returns the records plus the skipped-line count.
pub fn read_attempt_log_lenient(path: &Path) -> Result<(Vec<AttemptRecord>, usize), EvalError> {
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for line in reader.lines() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AttemptRecord>(&line) {
            Ok(record) => records.push(record),
            Err(_) => skipped += 1,
        }
    }
    Ok((records, skipped))
}

/// Group records into complete episodes: instances holding exactly the
/// attempts `1..=budget`, sorted by attempt. Incomplete or duplicated
/// episodes are dropped (a torn write from an interrupted run, or an id
/// logged twice, must not poison aggregation).
pub fn group_episodes(
    records: Vec<AttemptRecord>,
    budget: u32,
) -> BTreeMap<String, Vec<AttemptRecord>> {
    let mut by_instance: BTreeMap<String, Vec<AttemptRecord>> = BTreeMap::new();
    for record in records {
        by_instance
            .entry(record.instance_id.clone())
            .or_default()
            .push(record);
    }
    by_instance.retain(|_, attempts| {
        attempts.sort_by_key(|r| r.attempt_index);
        attempts.dedup_by_key(|r| r.attempt_index);
        attempts.len() == budget as usize
            && attempts
                .iter()
                .enumerate()
                .all(|(i, r)| r.attempt_index == i as u32 + 1)
    });
    by_instance
}

/// Reduce complete episodes into a report. Deterministic: episodes are
/// consumed in instance-id order regardless of completion order.
pub fn aggregate(
    episodes: &BTreeMap<String, Vec<AttemptRecord>>,
    labels: &BTreeMap<String, u8>,
    budget: u32,
    instances_failed: usize,
) -> Result<EvaluationReport, EvalError> {
    if episodes.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let budget = budget as usize;
    let mut per_attempt_accuracy = Vec::with_capacity(budget);
    let mut avg_tokens_per_attempt = Vec::with_capacity(budget);
    let mut counts = Vec::with_capacity(budget);

    for attempt in 0..budget {
        let mut correct = 0usize;
        let mut incorrect = 0usize;
        let mut unparseable = 0usize;
        let mut token_sum = 0u128;
        for (id, attempts) in episodes {
            let record = &attempts[attempt];
            let label = labels
                .get(id)
                .ok_or_else(|| EvalError::MissingLabel(id.clone()))?;
            match verdict_to_label(record.verdict) {
                None => unparseable += 1,
                Some(predicted) if predicted == *label => correct += 1,
                Some(_) => incorrect += 1,
            }
            token_sum += u128::from(record.cumulative_tokens);
        }
        let total = episodes.len();
        per_attempt_accuracy.push(correct as f64 / total as f64);
        avg_tokens_per_attempt.push(token_sum as f64 / total as f64);
        counts.push(AttemptCounts {
            correct,
            incorrect,
            unparseable,
        });
    }

    let acc_init = per_attempt_accuracy[0];
    let delta: Vec<Option<f64>> = per_attempt_accuracy[1..]
        .iter()
        .map(|&acc| delta_relative(acc_init, acc))
        .collect();
    let delta_relative_note = if delta.iter().any(Option::is_none) {
        Some("delta-relative undefined: attempt-1 accuracy is 1.0 (no headroom)".to_string())
    } else {
        None
    };

    let points: Vec<(f64, f64)> = per_attempt_accuracy
        .iter()
        .enumerate()
        .map(|(i, &acc)| ((i + 1) as f64, acc))
        .collect();
    let trend = if points.len() >= 2 {
        trend_r(&points)?
    } else {
        None
    };

    Ok(EvaluationReport {
        per_attempt_accuracy,
        delta_relative: delta,
        delta_relative_note,
        trend_r: trend,
        avg_tokens_per_attempt,
        counts,
        instances_evaluated: episodes.len(),
        instances_failed,
    })
}

/// Config echo embedded in every report so a run can be reproduced from
/// its outputs alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEcho {
    pub harness_version: String,
    pub budget: u32,
    pub injection: String,
    pub think_open: String,
    pub think_close: String,
    pub verdict_marker_a: String,
    pub verdict_marker_b: String,
    pub finalize_suffix: String,
    pub segment_max_tokens: u64,
    pub finalize_max_tokens: u64,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub parallelism: usize,
    pub template_id: String,
    pub instance_count: usize,
}

impl RunEcho {
    fn new(cfg: &RunConfig, template: &TemplateSpec, instance_count: usize) -> Self {
        Self {
            harness_version: cfg.harness_version.clone(),
            budget: cfg.forcing.budget,
            injection: cfg.forcing.injection.clone(),
            think_open: cfg.forcing.markers.think_open.clone(),
            think_close: cfg.forcing.markers.think_close.clone(),
            verdict_marker_a: template.verdict_markers.0.clone(),
            verdict_marker_b: template.verdict_markers.1.clone(),
            finalize_suffix: cfg.forcing.finalize_suffix.clone(),
            segment_max_tokens: cfg.forcing.segment_max_tokens,
            finalize_max_tokens: cfg.forcing.finalize_max_tokens,
            temperature: cfg.forcing.temperature,
            seed: cfg.forcing.seed,
            parallelism: cfg.parallelism,
            template_id: template.template_id.clone(),
            instance_count,
        }
    }
}

/// The report file: the config echo plus the aggregated metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub config: RunEcho,
    #[serde(flatten)]
    pub report: EvaluationReport,
}

#[derive(Debug, Serialize)]
struct FailureLine<'a> {
    instance_id: &'a str,
    error: String,
}

/// File names produced inside the output directory.
pub const ATTEMPTS_FILE: &str = "attempts.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const PROVENANCE_FILE: &str = "provenance.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Run the full evaluation: one budget-forced episode per instance under
/// bounded parallelism, logged to `attempts.jsonl` (flushed per episode),
/// aggregated into `report.json` and a plotting-ready `report.csv`.
///
/// With `resume`, instances whose complete episodes are already in the log
/// are skipped; the rebuilt report is byte-identical to an uninterrupted
/// run because aggregation only ever sees the sorted log contents.
pub fn evaluate_run(
    instances: &[PreferenceInstance],
    template: &TemplateSpec,
    backend: &dyn CompletionBackend,
    cfg: &RunConfig,
) -> Result<EvaluationReport, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    cfg.forcing.validate()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;

    // Provenance before any data.
    let echo = RunEcho::new(cfg, template, instances.len());
    let provenance_path = cfg.output_dir.join(PROVENANCE_FILE);
    std::fs::write(
        &provenance_path,
        serde_json::to_string_pretty(&echo).expect("echo serializes"),
    )
    .map_err(io_err(&provenance_path))?;

    let log_path = cfg.output_dir.join(ATTEMPTS_FILE);
    let mut already_done: BTreeSet<String> = BTreeSet::new();
    if cfg.resume && log_path.exists() {
        let (existing, _torn) = read_attempt_log_lenient(&log_path)?;
        let complete = group_episodes(existing, cfg.forcing.budget);
        // Compact the log to complete episodes so a torn write from the
        // interrupted run cannot linger alongside its re-run.
        let mut rewritten = std::fs::File::create(&log_path).map_err(io_err(&log_path))?;
        for attempts in complete.values() {
            for record in attempts {
                let line = serde_json::to_string(record).expect("record serializes");
                writeln!(rewritten, "{line}").map_err(io_err(&log_path))?;
            }
        }
        rewritten.flush().map_err(io_err(&log_path))?;
        already_done = complete.into_keys().collect();
    }

    let writer = Mutex::new(if cfg.resume && log_path.exists() {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?
    } else {
        std::fs::File::create(&log_path).map_err(io_err(&log_path))?
    });

    let pending: Vec<&PreferenceInstance> = instances
        .iter()
        .filter(|instance| !already_done.contains(&instance.id))
        .collect();

    let lexicon = ReflectiveLexicon::default();
    let next = AtomicUsize::new(0);
    let failed = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let failures: Mutex<Vec<(String, String)>> = Mutex::new(Vec::new());
    let total = instances.len();

    std::thread::scope(|scope| {
        for _ in 0..cfg.parallelism.max(1) {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= pending.len() {
                    break;
                }
                let instance = pending[index];
                let prompt = template.render(instance);
                let outcome = run_stts(instance, &prompt, backend, &cfg.forcing, &lexicon);
                match outcome.error {
                    None => {
                        let mut file = writer.lock().expect("writer poisoned");
                        for record in &outcome.records {
                            let line =
                                serde_json::to_string(record).expect("record serializes");
                            let _ = writeln!(file, "{line}");
                        }
                        let _ = file.flush();
                    }
                    Some(error) => {
                        failures
                            .lock()
                            .expect("failures poisoned")
                            .push((instance.id.clone(), error.to_string()));
                        let failed_now = failed.fetch_add(1, Ordering::SeqCst) + 1;
                        if failed_now as f64 / total as f64 > cfg.max_failure_fraction {
                            abort.store(true, Ordering::SeqCst);
                        }
                    }
                }
            });
        }
    });

    let failures = failures.into_inner().expect("failures poisoned");
    if !failures.is_empty() {
        let failures_path = cfg.output_dir.join(FAILURES_FILE);
        let mut file = std::fs::File::create(&failures_path).map_err(io_err(&failures_path))?;
        for (instance_id, error) in &failures {
            let line = serde_json::to_string(&FailureLine {
                instance_id,
                error: error.clone(),
            })
            .expect("failure serializes");
            writeln!(file, "{line}").map_err(io_err(&failures_path))?;
        }
    }
    if abort.load(Ordering::SeqCst) {
        return Err(EvalError::TooManyFailures {
            failed: failures.len(),
            total,
            limit: cfg.max_failure_fraction,
        });
    }

    // Aggregate from the log, restricted to this dataset's instances.
    let labels: BTreeMap<String, u8> = instances
        .iter()
        .map(|instance| (instance.id.clone(), instance.label))
        .collect();
    let mut episodes = group_episodes(read_attempt_log(&log_path)?, cfg.forcing.budget);
    episodes.retain(|id, _| labels.contains_key(id));
    let report = aggregate(&episodes, &labels, cfg.forcing.budget, failures.len())?;

    let report_path = cfg.output_dir.join(REPORT_FILE);
    let file = ReportFile {
        config: echo,
        report: report.clone(),
    };
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&file).expect("report serializes"),
    )
    .map_err(io_err(&report_path))?;

    let csv_path = cfg.output_dir.join(REPORT_CSV_FILE);
    std::fs::write(&csv_path, report_csv(&report)).map_err(io_err(&csv_path))?;

    Ok(report)
}

/// Companion CSV for external plotting: one row per attempt.
pub fn report_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("attempt_index,accuracy,delta_relative,avg_tokens\n");
    for (index, accuracy) in report.per_attempt_accuracy.iter().enumerate() {
        let delta = if index == 0 {
            String::new()
        } else {
            match report.delta_relative.get(index - 1) {
                Some(Some(value)) => format!("{value}"),
                _ => String::new(),
            }
        };
        out.push_str(&format!(
            "{},{},{},{}\n",
            index + 1,
            accuracy,
            delta,
            report.avg_tokens_per_attempt[index]
        ));
    }
    out
}
