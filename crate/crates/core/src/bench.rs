//! Benchmark ingest into canonical preference instances.
//!
//! Two file shapes are supported, both JSONL:
//!
//! - pairwise: `{id, query, answer_a, answer_b, label}` with optional
//!   `source_tag` (the dataset spec's tag wins when set);
//! - one-to-many: `{id, query, chosen, rejected: [..]}`, expanded to one
//!   instance per rejected solution with deterministic position
//!   alternation so chosen answers are balanced across the A and B slots.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::PreferenceInstance;

/// Where and how to load one benchmark file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub format: DatasetFormat,
    pub source_tag: String,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    #[default]
    Pairwise,
    OneToMany,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read `{path}`: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("`{path}` line {line}: malformed JSON: {source}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("dataset limit must be >= 1")]
    ZeroLimit,
}

/// A line that parsed as JSON but failed validation. These are counted and
/// reported rather than aborting the load.
#[derive(Debug, Clone, Serialize)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
}

/// Result of loading one dataset file.
#[derive(Debug)]
pub struct LoadOutcome {
    pub instances: Vec<PreferenceInstance>,
    pub rejected: Vec<RejectedLine>,
}

#[derive(Deserialize)]
struct PairwiseLine {
    id: String,
    query: String,
    answer_a: String,
    answer_b: String,
    label: u8,
    #[serde(default)]
    source_tag: Option<String>,
}

/// One one-to-many problem: a single chosen solution and the rejected ones.
#[derive(Debug, Clone, Deserialize)]
pub struct OneToManyProblem {
    pub id: String,
    pub query: String,
    pub chosen: String,
    pub rejected: Vec<String>,
}

/// Load a dataset according to its spec.
pub fn load(spec: &DatasetSpec) -> Result<LoadOutcome, IngestError> {
    match spec.format {
        DatasetFormat::Pairwise => load_pairwise(spec),
        DatasetFormat::OneToMany => load_one_to_many(spec),
    }
}

/// Load a pairwise JSONL file. Lines that are not valid JSON abort the
/// load with their line number; lines that parse but violate the instance
/// invariants (non-binary label, empty fields, duplicate id) are rejected
/// and reported. Order is preserved unless `shuffle_seed` is set, and
/// `limit` truncates after the optional shuffle.
pub fn load_pairwise(spec: &DatasetSpec) -> Result<LoadOutcome, IngestError> {
    check_limit(spec)?;
    let mut instances = Vec::new();
    let mut rejected = Vec::new();
    let mut seen_ids = BTreeSet::new();

    for (line_no, line) in read_lines(spec)? {
        let parsed: PairwiseLine =
            serde_json::from_str(&line).map_err(|source| IngestError::MalformedLine {
                path: spec.path.clone(),
                line: line_no,
                source,
            })?;
        let tag = if spec.source_tag.is_empty() {
            parsed.source_tag.unwrap_or_default()
        } else {
            spec.source_tag.clone()
        };
        match PreferenceInstance::new(
            parsed.id,
            parsed.query,
            parsed.answer_a,
            parsed.answer_b,
            parsed.label,
            tag,
        ) {
            Ok(instance) => {
                if !seen_ids.insert(instance.id.clone()) {
                    rejected.push(RejectedLine {
                        line: line_no,
                        reason: format!("duplicate id `{}`", instance.id),
                    });
                } else {
                    instances.push(instance);
                }
            }
            Err(e) => rejected.push(RejectedLine {
                line: line_no,
                reason: e.to_string(),
            }),
        }
    }

    finish(spec, instances, rejected)
}

/// Load a one-to-many JSONL file, expanding each problem instance-wise.
pub fn load_one_to_many(spec: &DatasetSpec) -> Result<LoadOutcome, IngestError> {
    check_limit(spec)?;
    let mut instances = Vec::new();
    let mut rejected = Vec::new();
    let mut seen_ids = BTreeSet::new();

    for (line_no, line) in read_lines(spec)? {
        let problem: OneToManyProblem =
            serde_json::from_str(&line).map_err(|source| IngestError::MalformedLine {
                path: spec.path.clone(),
                line: line_no,
                source,
            })?;
        match expand_one_to_many(&problem, &spec.source_tag) {
            Ok(expanded) => {
                for instance in expanded {
                    if !seen_ids.insert(instance.id.clone()) {
                        rejected.push(RejectedLine {
                            line: line_no,
                            reason: format!("duplicate id `{}`", instance.id),
                        });
                    } else {
                        instances.push(instance);
                    }
                }
            }
            Err(e) => rejected.push(RejectedLine {
                line: line_no,
                reason: e.to_string(),
            }),
        }
    }

    finish(spec, instances, rejected)
}

#[derive(Debug, Error)]
pub enum ExpandError {
    #[error("problem `{0}` has an empty rejected list")]
    EmptyRejected(String),
    #[error(transparent)]
    Invalid(#[from] crate::model::ValidationError),
}

/// Expand one chosen-vs-many-rejected problem into independent pairwise
/// instances, one per rejected solution (scored instance-wise, not
/// problem-wise).
///
/// Position assignment is deterministic: for rejected index `j` (0-based),
/// even `j` places the chosen solution as answer A with label 0 and odd `j`
/// places it as answer B with label 1, so each problem's labels balance to
/// 50/50 within one. Instance ids are suffixed `#j`.
pub fn expand_one_to_many(
    problem: &OneToManyProblem,
    source_tag: &str,
) -> Result<Vec<PreferenceInstance>, ExpandError> {
    if problem.rejected.is_empty() {
        return Err(ExpandError::EmptyRejected(problem.id.clone()));
    }
    let mut instances = Vec::with_capacity(problem.rejected.len());
    for (j, rejected) in problem.rejected.iter().enumerate() {
        let id = format!("{}#{j}", problem.id);
        let instance = if j % 2 == 0 {
            PreferenceInstance::new(id, &problem.query, &problem.chosen, rejected, 0, source_tag)?
        } else {
            PreferenceInstance::new(id, &problem.query, rejected, &problem.chosen, 1, source_tag)?
        };
        instances.push(instance);
    }
    Ok(instances)
}

fn check_limit(spec: &DatasetSpec) -> Result<(), IngestError> {
    if spec.limit == Some(0) {
        return Err(IngestError::ZeroLimit);
    }
    Ok(())
}

fn read_lines(spec: &DatasetSpec) -> Result<Vec<(usize, String)>, IngestError> {
    let file = std::fs::File::open(&spec.path).map_err(|source| IngestError::Io {
        path: spec.path.clone(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut lines = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| IngestError::Io {
            path: spec.path.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push((index + 1, line));
    }
    Ok(lines)
}

fn finish(
    spec: &DatasetSpec,
    mut instances: Vec<PreferenceInstance>,
    rejected: Vec<RejectedLine>,
) -> Result<LoadOutcome, IngestError> {
    if let Some(seed) = spec.shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        instances.shuffle(&mut rng);
    }
    if let Some(limit) = spec.limit {
        instances.truncate(limit);
    }
    Ok(LoadOutcome {
        instances,
        rejected,
    })
}
