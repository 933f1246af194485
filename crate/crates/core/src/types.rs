//! Core data types shared across the pipeline.
//!
//! Everything here is immutable once constructed and safe to share across
//! worker threads. Score fields start unset and are filled in by the scorers;
//! a score of 0.0 is a real score, never a placeholder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One question-answering example in the interchange shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reference_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short_label: Option<ShortLabel>,
}

impl QAExample {
    /// Checks record-level invariants; returns the first problem found.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id is empty".to_string());
        }
        if self.question.trim().is_empty() {
            return Err("question is empty".to_string());
        }
        if let Some(context) = &self.context {
            if context.trim().is_empty() {
                return Err("context is present but empty".to_string());
            }
        }
        if self.reference_answers.iter().any(|a| a.trim().is_empty()) {
            return Err("reference answer is empty".to_string());
        }
        Ok(())
    }
}

/// Closed label set for datasets with short-form decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShortLabel {
    Yes,
    No,
    Maybe,
}

impl FromStr for ShortLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" => Ok(ShortLabel::Yes),
            "no" => Ok(ShortLabel::No),
            "maybe" => Ok(ShortLabel::Maybe),
            other => Err(format!("unknown short label {other:?}")),
        }
    }
}

impl fmt::Display for ShortLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShortLabel::Yes => "yes",
            ShortLabel::No => "no",
            ShortLabel::Maybe => "maybe",
        };
        f.write_str(s)
    }
}

/// A fixed question/knowledge pair used to condition the factuality scorer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub question: String,
    pub knowledge: String,
}

/// One knowledge draft produced by the knowledge loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeCandidate {
    pub text: String,
    /// Token count reported by the scoring backend; unset until scored.
    pub token_count: Option<usize>,
    /// Gating factuality score (mean or raw sum per config); unset until scored.
    pub factuality_score: Option<f64>,
    /// 0 for the first generation of a pass, +1 per refinement.
    pub revision: u32,
}

impl KnowledgeCandidate {
    pub fn new(text: String, revision: u32) -> Self {
        KnowledgeCandidate {
            text,
            token_count: None,
            factuality_score: None,
            revision,
        }
    }
}

/// One answer draft produced by the answering loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerCandidate {
    pub text: String,
    /// Mean per-sentence consistency logprob; unset until scored.
    pub consistency_score: Option<f64>,
    /// Question-entailment cosine; unset until the candidate reaches the gate.
    pub entailment_score: Option<f64>,
    /// 0 for the first generation of a pass, +1 per refinement.
    pub revision: u32,
}

impl AnswerCandidate {
    pub fn new(text: String, revision: u32) -> Self {
        AnswerCandidate {
            text,
            consistency_score: None,
            entailment_score: None,
            revision,
        }
    }
}
