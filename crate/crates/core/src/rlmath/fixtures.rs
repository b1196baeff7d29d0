//! Columnar batch fixtures for the self-check suite.
//!
//! Format: whitespace-separated columns
//! `token_index logp_new logp_old logp_ref reward value mask`,
//! one row per token plus one trailing row whose `value` column supplies
//! the bootstrap tail (its other numeric fields are ignored; by convention
//! they are written as zeros). Lines starting with `#` are comments.

use std::path::Path;

use thiserror::Error;

use super::{RlError, TokenLogProbs, TrajectoryBatch};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("failed to read fixture: {0}")]
    Io(#[from] std::io::Error),
    #[error("fixture line {line}: expected 7 columns, found {found}")]
    ColumnCount { line: usize, found: usize },
    #[error("fixture line {line}: column `{column}` is not a number: {value}")]
    BadNumber {
        line: usize,
        column: &'static str,
        value: String,
    },
    #[error("fixture needs at least 2 rows (tokens plus the bootstrap tail)")]
    TooShort,
    #[error(transparent)]
    Invalid(#[from] RlError),
}

/// A parsed fixture: per-token log-probs and the reward/value trajectory.
#[derive(Debug, Clone)]
pub struct FixtureBatch {
    pub logps: TokenLogProbs,
    pub trajectory: TrajectoryBatch,
}

pub fn load_fixture(path: &Path) -> Result<FixtureBatch, FixtureError> {
    let text = std::fs::read_to_string(path)?;
    parse_fixture(&text)
}

pub(crate) fn parse_fixture(text: &str) -> Result<FixtureBatch, FixtureError> {
    struct Row {
        logp_new: f64,
        logp_old: f64,
        logp_ref: f64,
        reward: f64,
        value: f64,
        mask: bool,
    }

    let mut rows = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(FixtureError::ColumnCount {
                line: index + 1,
                found: fields.len(),
            });
        }
        let number = |column: &'static str, raw: &str| -> Result<f64, FixtureError> {
            raw.parse::<f64>().map_err(|_| FixtureError::BadNumber {
                line: index + 1,
                column,
                value: raw.to_string(),
            })
        };
        rows.push(Row {
            logp_new: number("logp_new", fields[1])?,
            logp_old: number("logp_old", fields[2])?,
            logp_ref: number("logp_ref", fields[3])?,
            reward: number("reward", fields[4])?,
            value: number("value", fields[5])?,
            mask: number("mask", fields[6])? != 0.0,
        });
    }
    if rows.len() < 2 {
        return Err(FixtureError::TooShort);
    }

    let bootstrap = rows.pop().expect("checked length");
    let logps = TokenLogProbs::new(
        rows.iter().map(|r| r.logp_new).collect(),
        rows.iter().map(|r| r.logp_old).collect(),
        rows.iter().map(|r| r.logp_ref).collect(),
        rows.iter().map(|r| r.mask).collect(),
    )?;
    let mut values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    values.push(bootstrap.value);
    let trajectory =
        TrajectoryBatch::new(rows.iter().map(|r| r.reward).collect(), values, 0.0)?;

    Ok(FixtureBatch { logps, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_small_fixture() {
        let text = "\
# idx lnew lold lref reward value mask
0 -0.5 -0.6 -0.7 1.0 0.2 1
1 -1.0 -1.1 -0.9 0.0 0.1 1
2 -2.0 -2.0 -2.0 0.0 0.0 0
3 0 0 0 0 0.05 0
";
        let fixture = parse_fixture(text).unwrap();
        assert_eq!(fixture.logps.len(), 3);
        assert_eq!(fixture.logps.mask, vec![true, true, false]);
        assert_eq!(fixture.trajectory.rewards, vec![1.0, 0.0, 0.0]);
        assert_eq!(fixture.trajectory.values, vec![0.2, 0.1, 0.0, 0.05]);
    }

    #[test]
    fn reports_bad_rows() {
        assert!(matches!(
            parse_fixture("0 1 2 3\n"),
            Err(FixtureError::ColumnCount { line: 1, found: 4 })
        ));
        assert!(matches!(
            parse_fixture("0 x 0 0 0 0 1\n0 0 0 0 0 0 0\n"),
            Err(FixtureError::BadNumber { line: 1, .. })
        ));
        assert!(matches!(
            parse_fixture("0 0 0 0 0 0 1\n"),
            Err(FixtureError::TooShort)
        ));
    }
}
