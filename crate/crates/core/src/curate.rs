//! Rejection-sampling curation with reflection cycles.
//!
//! Cycle 0 is a plain generation; trajectories whose verdict matches the
//! ground-truth label are accepted as-is. Each subsequent cycle applies one
//! more budget-forced reflection to the still-incorrect pool and accepts
//! the newly correct trajectories together with their reflection-annotated
//! traces. Whatever remains after the final cycle lands in the persistent
//! bucket (kept, not discarded, so downstream experiments can reuse it).
//!
//! Cycle indexing is 0-based: "cycle 0" is the first pass, and a record
//! accepted at cycle k carries exactly k injected reflective tokens. Note
//! the evaluation side counts differently ("attempt 1" is the un-forced
//! pass), so curation cycle k corresponds to evaluation attempt k + 1.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::CompletionBackend;
use crate::forcing::{EpisodeRunner, ForcingConfig};
use crate::model::{verdict_to_label, PreferenceInstance, Verdict};
use crate::prompt::TemplateSpec;
use crate::trace::ReflectiveLexicon;

#[derive(Debug, Error)]
pub enum CurateError {
    #[error("nothing to curate: instance list is empty")]
    EmptyInput,
    #[error("no accepted records to emit")]
    EmptyAccepted,
    #[error("io failure on `{path}`: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("accepted record references unknown instance `{0}`")]
    UnknownInstance(String),
    #[error(transparent)]
    Forcing(#[from] crate::forcing::ForcingConfigError),
}

/// One accepted trajectory. The trajectory text is the full think text
/// including every injected reflective token (markers not included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub instance_id: String,
    pub accepted_at_cycle: u32,
    pub trajectory: String,
    pub final_text: String,
    pub verdict: Verdict,
}

/// Ledger cell for one cycle: how many of the pool turned newly correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleStat {
    pub newly_correct: usize,
    pub pool: usize,
}

/// Per-source-tag ledger. `original` counts every instance seen for the
/// tag; the cycle pools cover only clean-io instances, so
/// `pool[k+1] = pool[k] - newly_correct[k]` holds exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagStats {
    pub original: usize,
    pub cycles: Vec<CycleStat>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationStats {
    pub per_tag: BTreeMap<String, TagStats>,
}

/// Everything the pipeline produces. Conservation holds by construction:
/// `accepted + persistent_failures + failed_io` partitions the input.
#[derive(Debug)]
pub struct CurationOutcome {
    pub accepted: Vec<CurationRecord>,
    pub persistent_failures: Vec<String>,
    pub failed_io: Vec<(String, String)>,
    pub stats: CurationStats,
}

enum InstanceResult {
    Accepted(CurationRecord),
    Persistent,
    FailedIo(String),
}

fn curate_instance(
    instance: &PreferenceInstance,
    template: &TemplateSpec,
    backend: &dyn CompletionBackend,
    cycles: u32,
    cfg: &ForcingConfig,
    lexicon: &ReflectiveLexicon,
) -> InstanceResult {
    let prompt = template.render(instance);
    let mut runner = EpisodeRunner::new(instance, &prompt, backend, cfg, lexicon);
    for cycle in 0..=cycles {
        match runner.step() {
            Ok(record) => {
                if verdict_to_label(record.verdict) == Some(instance.label) {
                    return InstanceResult::Accepted(CurationRecord {
                        instance_id: instance.id.clone(),
                        accepted_at_cycle: cycle,
                        trajectory: record.trace.think_segments.join(&cfg.injection),
                        final_text: record.trace.final_text,
                        verdict: record.verdict,
                    });
                }
            }
            Err(error) => return InstanceResult::FailedIo(error.to_string()),
        }
    }
    InstanceResult::Persistent
}

/// Run the curation pipeline over a set of instances.
///
/// `cycles` is the number of reflection cycles applied after the first
/// pass (`cycles = 0` is a pure rejection filter). Instances progress
/// independently and concurrently; the ledger is reduced deterministically
/// once everything settles. Backend failures move the instance to the
/// failed-io bucket and out of every ledger denominator.
pub fn curate(
    instances: &[PreferenceInstance],
    template: &TemplateSpec,
    backend: &dyn CompletionBackend,
    cycles: u32,
    cfg: &ForcingConfig,
    parallelism: usize,
) -> Result<CurationOutcome, CurateError> {
    if instances.is_empty() {
        return Err(CurateError::EmptyInput);
    }
    cfg.markers.validate().map_err(crate::forcing::ForcingConfigError::Markers)?;
    if cycles > 0 && cfg.injection.is_empty() {
        return Err(CurateError::Forcing(
            crate::forcing::ForcingConfigError::EmptyInjection,
        ));
    }

    let lexicon = ReflectiveLexicon::default();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, InstanceResult)>> = Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..parallelism.max(1) {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= instances.len() {
                    break;
                }
                let result = curate_instance(
                    &instances[index],
                    template,
                    backend,
                    cycles,
                    cfg,
                    &lexicon,
                );
                results.lock().expect("results poisoned").push((index, result));
            });
        }
    });

    let mut results = results.into_inner().expect("results poisoned");
    results.sort_by_key(|(index, _)| *index);

    let mut accepted = Vec::new();
    let mut persistent_failures = Vec::new();
    let mut failed_io = Vec::new();
    // accepted_at_cycle per clean instance, keyed (tag, cycle), plus clean
    // and original totals per tag
    let mut newly_correct: BTreeMap<(String, u32), usize> = BTreeMap::new();
    let mut clean_total: BTreeMap<String, usize> = BTreeMap::new();
    let mut original_total: BTreeMap<String, usize> = BTreeMap::new();

    for (index, result) in results {
        let instance = &instances[index];
        *original_total.entry(instance.source_tag.clone()).or_default() += 1;
        match result {
            InstanceResult::Accepted(record) => {
                *clean_total.entry(instance.source_tag.clone()).or_default() += 1;
                *newly_correct
                    .entry((instance.source_tag.clone(), record.accepted_at_cycle))
                    .or_default() += 1;
                accepted.push(record);
            }
            InstanceResult::Persistent => {
                *clean_total.entry(instance.source_tag.clone()).or_default() += 1;
                persistent_failures.push(instance.id.clone());
            }
            InstanceResult::FailedIo(error) => {
                failed_io.push((instance.id.clone(), error));
            }
        }
    }

    let mut stats = CurationStats::default();
    for (tag, &original) in &original_total {
        let clean = clean_total.get(tag).copied().unwrap_or(0);
        let mut pool = clean;
        let mut cycle_stats = Vec::with_capacity(cycles as usize + 1);
        for cycle in 0..=cycles {
            let correct = newly_correct
                .get(&(tag.clone(), cycle))
                .copied()
                .unwrap_or(0);
            cycle_stats.push(CycleStat {
                newly_correct: correct,
                pool,
            });
            pool -= correct;
        }
        stats.per_tag.insert(
            tag.clone(),
            TagStats {
                original,
                cycles: cycle_stats,
            },
        );
    }

    Ok(CurationOutcome {
        accepted,
        persistent_failures,
        failed_io,
        stats,
    })
}

/// Render the ledger as a fixed-width table, one dataset per row and one
/// `newly_correct/pool` cell per cycle.
pub fn render_stats_table(stats: &CurationStats) -> String {
    let cycle_count = stats
        .per_tag
        .values()
        .map(|t| t.cycles.len())
        .max()
        .unwrap_or(0);
    let mut header: Vec<String> = vec!["Dataset".into(), "Original Number".into()];
    for cycle in 0..cycle_count {
        header.push(format!("Attempt {cycle}"));
    }
    let mut rows: Vec<Vec<String>> = vec![header];
    for (tag, tag_stats) in &stats.per_tag {
        let mut row = vec![tag.clone(), tag_stats.original.to_string()];
        for stat in &tag_stats.cycles {
            row.push(format!("{}/{}", stat.newly_correct, stat.pool));
        }
        rows.push(row);
    }

    let columns = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut widths = vec![0usize; columns];
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for (index, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, cell)| format!("{:<width$}", cell, width = widths[i]))
            .collect();
        out.push_str(line.join(" | ").trim_end());
        out.push('\n');
        if index == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-|-"));
            out.push('\n');
        }
    }
    out
}

#[derive(Serialize)]
struct SftLine<'a> {
    instance_id: &'a str,
    query: &'a str,
    answer_a: &'a str,
    answer_b: &'a str,
    trajectory: String,
    final_text: &'a str,
    accepted_at_cycle: u32,
}

/// Write the accepted records as a supervision dataset: JSONL ordered by
/// instance id, trajectories wrapped in the think markers.
pub fn emit_sft_dataset(
    accepted: &[CurationRecord],
    instances: &BTreeMap<String, PreferenceInstance>,
    cfg: &ForcingConfig,
    path: &Path,
) -> Result<(), CurateError> {
    if accepted.is_empty() {
        return Err(CurateError::EmptyAccepted);
    }
    let mut sorted: Vec<&CurationRecord> = accepted.iter().collect();
    sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));

    let file = std::fs::File::create(path).map_err(|source| CurateError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut writer = std::io::BufWriter::new(file);
    for record in sorted {
        let instance = instances
            .get(&record.instance_id)
            .ok_or_else(|| CurateError::UnknownInstance(record.instance_id.clone()))?;
        let line = SftLine {
            instance_id: &record.instance_id,
            query: &instance.query,
            answer_a: &instance.answer_a,
            answer_b: &instance.answer_b,
            trajectory: format!(
                "{}{}{}",
                cfg.markers.think_open, record.trajectory, cfg.markers.think_close
            ),
            final_text: &record.final_text,
            accepted_at_cycle: record.accepted_at_cycle,
        };
        let json = serde_json::to_string(&line).expect("sft line serializes");
        writeln!(writer, "{json}").map_err(|source| CurateError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    writer.flush().map_err(|source| CurateError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScriptEntry, ScriptedBackend, ScriptedFailure};

    fn instance(id: &str, tag: &str) -> PreferenceInstance {
        // label 0: verdict A is correct
        PreferenceInstance::new(id, "q", "x", "y", 0, tag).unwrap()
    }

    fn entry(id: &str, attempt: u32, verdict: &str) -> ScriptEntry {
        ScriptEntry {
            instance_id: id.into(),
            attempt_index: attempt,
            think: format!("{} thoughts attempt {attempt}</think>", id),
            final_text: format!("verdict: {verdict}"),
            think_tokens: None,
            final_tokens: None,
            error: None,
        }
    }

    /// Instance correct from `correct_at` onward (1-based attempt).
    fn script_for(id: &str, correct_at: Option<u32>, attempts: u32) -> Vec<ScriptEntry> {
        (1..=attempts)
            .map(|k| {
                let verdict = match correct_at {
                    Some(at) if k >= at => "[[A]]",
                    _ => "[[B]]",
                };
                entry(id, k, verdict)
            })
            .collect()
    }

    fn run(
        backend: &ScriptedBackend,
        instances: &[PreferenceInstance],
        cycles: u32,
    ) -> CurationOutcome {
        curate(
            instances,
            &TemplateSpec::default(),
            backend,
            cycles,
            &ForcingConfig::default(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn correct_at_first_pass_has_no_injections() {
        let backend = ScriptedBackend::new(script_for("a", Some(1), 1)).unwrap();
        let outcome = run(&backend, &[instance("a", "t")], 3);
        assert_eq!(outcome.accepted.len(), 1);
        let record = &outcome.accepted[0];
        assert_eq!(record.accepted_at_cycle, 0);
        assert!(!record.trajectory.contains("Wait"));
    }

    #[test]
    fn accepted_at_cycle_k_has_k_injections() {
        let backend = ScriptedBackend::new(script_for("a", Some(3), 3)).unwrap();
        let outcome = run(&backend, &[instance("a", "t")], 3);
        let record = &outcome.accepted[0];
        assert_eq!(record.accepted_at_cycle, 2);
        assert_eq!(record.trajectory.matches(" Wait,").count(), 2);
    }

    #[test]
    fn never_correct_goes_persistent() {
        let backend = ScriptedBackend::new(script_for("a", None, 4)).unwrap();
        let outcome = run(&backend, &[instance("a", "t")], 3);
        assert!(outcome.accepted.is_empty());
        assert_eq!(outcome.persistent_failures, vec!["a".to_string()]);
    }

    #[test]
    fn io_failure_lands_in_its_own_bucket() {
        let mut entries = script_for("a", Some(1), 1);
        let mut broken = entry("b", 1, "[[B]]");
        broken.error = Some(ScriptedFailure::Transport);
        entries.push(broken);
        let backend = ScriptedBackend::new(entries).unwrap();
        let outcome = run(&backend, &[instance("a", "t"), instance("b", "t")], 0);
        assert_eq!(outcome.accepted.len(), 1);
        assert_eq!(outcome.failed_io.len(), 1);
        assert_eq!(outcome.failed_io[0].0, "b");
        // failed-io excluded from the ledger pools
        assert_eq!(outcome.stats.per_tag["t"].original, 2);
        assert_eq!(outcome.stats.per_tag["t"].cycles[0].pool, 1);
    }

    #[test]
    fn ledger_pools_shrink_by_newly_correct() {
        let mut entries = Vec::new();
        let mut instances = Vec::new();
        // 3 correct at cycle 0, 2 at cycle 1, 1 persistent
        for i in 0..3 {
            let id = format!("c0-{i}");
            entries.extend(script_for(&id, Some(1), 1));
            instances.push(instance(&id, "t"));
        }
        for i in 0..2 {
            let id = format!("c1-{i}");
            entries.extend(script_for(&id, Some(2), 2));
            instances.push(instance(&id, "t"));
        }
        entries.extend(script_for("never", None, 3));
        instances.push(instance("never", "t"));

        let backend = ScriptedBackend::new(entries).unwrap();
        let outcome = run(&backend, &instances, 2);
        let cycles = &outcome.stats.per_tag["t"].cycles;
        assert_eq!(
            cycles,
            &vec![
                CycleStat {
                    newly_correct: 3,
                    pool: 6
                },
                CycleStat {
                    newly_correct: 2,
                    pool: 3
                },
                CycleStat {
                    newly_correct: 0,
                    pool: 1
                },
            ]
        );
        assert_eq!(outcome.persistent_failures.len(), 1);
    }

    #[test]
    fn conservation_partitions_the_input() {
        let mut entries = Vec::new();
        let mut instances = Vec::new();
        entries.extend(script_for("a", Some(1), 1));
        entries.extend(script_for("b", Some(2), 2));
        entries.extend(script_for("c", None, 2));
        let mut broken = entry("d", 1, "[[B]]");
        broken.error = Some(ScriptedFailure::Transport);
        entries.push(broken);
        for id in ["a", "b", "c", "d"] {
            instances.push(instance(id, "t"));
        }
        let backend = ScriptedBackend::new(entries).unwrap();
        let outcome = run(&backend, &instances, 1);
        assert_eq!(
            outcome.accepted.len() + outcome.persistent_failures.len() + outcome.failed_io.len(),
            instances.len()
        );
    }

    #[test]
    fn stats_table_shape() {
        let mut stats = CurationStats::default();
        stats.per_tag.insert(
            "fixture".into(),
            TagStats {
                original: 100,
                cycles: vec![
                    CycleStat {
                        newly_correct: 60,
                        pool: 100,
                    },
                    CycleStat {
                        newly_correct: 4,
                        pool: 40,
                    },
                ],
            },
        );
        let table = render_stats_table(&stats);
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].starts_with("Dataset"));
        assert!(lines[0].contains("Original Number"));
        assert!(lines[0].contains("Attempt 0"));
        assert!(lines[2].contains("60/100"));
        assert!(lines[2].contains("4/40"));
    }

    #[test]
    fn sft_emission_is_sorted_and_marked() {
        let backend = ScriptedBackend::new(
            [script_for("b", Some(1), 1), script_for("a", Some(2), 2)].concat(),
        )
        .unwrap();
        let instances = vec![instance("b", "t"), instance("a", "t")];
        let outcome = run(&backend, &instances, 1);
        let by_id: BTreeMap<String, PreferenceInstance> = instances
            .iter()
            .map(|i| (i.id.clone(), i.clone()))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sft.jsonl");
        emit_sft_dataset(&outcome.accepted, &by_id, &ForcingConfig::default(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["instance_id"], "a");
        assert_eq!(first["accepted_at_cycle"], 1);
        let trajectory = first["trajectory"].as_str().unwrap();
        assert!(trajectory.starts_with("<think>"));
        assert!(trajectory.ends_with("</think>"));
        assert!(trajectory.contains(" Wait,"));
    }

    #[test]
    fn empty_accepted_errors_on_emit() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_sft_dataset(
            &[],
            &BTreeMap::new(),
            &ForcingConfig::default(),
            &dir.path().join("sft.jsonl"),
        )
        .unwrap_err();
        assert!(matches!(err, CurateError::EmptyAccepted));
    }

    #[test]
    fn zero_cycles_is_a_pure_filter() {
        let backend = ScriptedBackend::new(
            [script_for("a", Some(1), 1), script_for("b", Some(2), 1)].concat(),
        )
        .unwrap();
        let outcome = run(&backend, &[instance("a", "t"), instance("b", "t")], 0);
        assert_eq!(outcome.accepted.len(), 1);
        assert_eq!(outcome.persistent_failures, vec!["b".to_string()]);
        for request in backend.transcript() {
            assert!(!request.prompt.contains(" Wait,"));
        }
    }
}
