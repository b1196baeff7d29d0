//! Pairwise judge prompt templating.
//!
//! A template is data: a body with `{query}`, `{answer_a}` and `{answer_b}`
//! placeholders plus the two verdict markers its instructions require. The
//! default template follows the common pairwise-comparison style with
//! `[[A]]` / `[[B]]` final-verdict markers, and any template can be loaded
//! from a plain UTF-8 file instead.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{JudgePrompt, PreferenceInstance};

pub const QUERY_SLOT: &str = "{query}";
pub const ANSWER_A_SLOT: &str = "{answer_a}";
pub const ANSWER_B_SLOT: &str = "{answer_b}";

const DEFAULT_TEMPLATE_BODY: &str = "\
You are an impartial judge. Compare the two candidate answers to the user's \
question below and decide which answer is better. Weigh helpfulness, \
correctness, relevance, and depth. Do not let the presentation order, the \
length of the answers, or the assistant names sway your decision.

[Question]
{query}

[Answer A]
{answer_a}

[Answer B]
{answer_b}

Think the comparison through carefully, then state your final verdict: \
write \"[[A]]\" if answer A is better, or \"[[B]]\" if answer B is better.
";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template_id}` is missing placeholder {placeholder}")]
    MissingPlaceholder {
        template_id: String,
        placeholder: &'static str,
    },
    #[error("template `{template_id}` contains placeholder {placeholder} more than once")]
    DuplicatePlaceholder {
        template_id: String,
        placeholder: &'static str,
    },
    #[error("template `{template_id}` never names verdict marker `{marker}` in its instructions")]
    MarkerNotNamed { template_id: String, marker: String },
    #[error("verdict markers must be distinct and non-empty")]
    BadMarkers,
}

/// A validated judge prompt template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub template_id: String,
    pub body: String,
    pub verdict_markers: (String, String),
}

impl Default for TemplateSpec {
    fn default() -> Self {
        Self::new(
            "pairwise-default",
            DEFAULT_TEMPLATE_BODY,
            ("[[A]]".into(), "[[B]]".into()),
        )
        .expect("default template is valid")
    }
}

impl TemplateSpec {
    /// Validate a template at load time: each placeholder must appear
    /// exactly once and the body must name both verdict markers. Render can
    /// then never fail.
    pub fn new(
        template_id: impl Into<String>,
        body: impl Into<String>,
        verdict_markers: (String, String),
    ) -> Result<Self, TemplateError> {
        let spec = Self {
            template_id: template_id.into(),
            body: body.into(),
            verdict_markers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Load a template body from a UTF-8 file.
    pub fn from_file(
        template_id: &str,
        path: &Path,
        verdict_markers: (String, String),
    ) -> Result<Self, std::io::Error> {
        let body = std::fs::read_to_string(path)?;
        Self::new(template_id, body, verdict_markers)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
    }

    fn validate(&self) -> Result<(), TemplateError> {
        let (marker_a, marker_b) = &self.verdict_markers;
        if marker_a.is_empty() || marker_b.is_empty() || marker_a == marker_b {
            return Err(TemplateError::BadMarkers);
        }
        for placeholder in [QUERY_SLOT, ANSWER_A_SLOT, ANSWER_B_SLOT] {
            match self.body.matches(placeholder).count() {
                0 => {
                    return Err(TemplateError::MissingPlaceholder {
                        template_id: self.template_id.clone(),
                        placeholder,
                    })
                }
                1 => {}
                _ => {
                    return Err(TemplateError::DuplicatePlaceholder {
                        template_id: self.template_id.clone(),
                        placeholder,
                    })
                }
            }
        }
        for marker in [marker_a, marker_b] {
            if !self.body.contains(marker.as_str()) {
                return Err(TemplateError::MarkerNotNamed {
                    template_id: self.template_id.clone(),
                    marker: marker.clone(),
                });
            }
        }
        Ok(())
    }

    /// Substitute the instance into the template. Substitution is a single
    /// pass over the body: placeholder-like text inside the substituted
    /// values is copied verbatim and never re-expanded.
    pub fn render(&self, instance: &PreferenceInstance) -> JudgePrompt {
        let mut slots: Vec<(usize, &str, &str)> = vec![
            (
                self.body.find(QUERY_SLOT).expect("validated"),
                QUERY_SLOT,
                instance.query.as_str(),
            ),
            (
                self.body.find(ANSWER_A_SLOT).expect("validated"),
                ANSWER_A_SLOT,
                instance.answer_a.as_str(),
            ),
            (
                self.body.find(ANSWER_B_SLOT).expect("validated"),
                ANSWER_B_SLOT,
                instance.answer_b.as_str(),
            ),
        ];
        slots.sort_by_key(|(at, _, _)| *at);

        let mut rendered = String::with_capacity(self.body.len());
        let mut cursor = 0;
        for (at, placeholder, value) in slots {
            rendered.push_str(&self.body[cursor..at]);
            rendered.push_str(value);
            cursor = at + placeholder.len();
        }
        rendered.push_str(&self.body[cursor..]);

        JudgePrompt {
            template_id: self.template_id.clone(),
            rendered_text: rendered,
            verdict_markers: self.verdict_markers.clone(),
        }
    }
}
