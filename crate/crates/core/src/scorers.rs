//! The three gate scores that drive the reflection loops.
//!
//! Factuality: token-level log-probability of the knowledge under a scoring
//! prompt built from in-context demonstrations. Consistency: mean per-sentence
//! log-probability of the answer conditioned on the knowledge. Entailment:
//! cosine similarity between question and answer embeddings. All gates are
//! inclusive: a score equal to its threshold passes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::config::{FactualityGate, LoopConfig};
use crate::metrics::split_sentence_spans;
use crate::prompts::{self, PromptError};
use crate::types::Demonstration;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("{what} is empty")]
    EmptyInput { what: &'static str },
    #[error("backend returned zero tokens for a non-empty continuation")]
    ZeroTokens,
    #[error("embedding dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Token log-probability totals for a knowledge string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactualityResult {
    pub sum_logprob: f64,
    pub mean_logprob: f64,
    pub token_count: usize,
    /// Whether the configured gate score met the factuality threshold.
    pub passed: bool,
}

impl FactualityResult {
    /// The value the gate compares against the threshold: the raw sum or the
    /// length-normalized mean, per configuration.
    pub fn gate_score(&self, gate: FactualityGate) -> f64 {
        match gate {
            FactualityGate::Sum => self.sum_logprob,
            FactualityGate::Mean => self.mean_logprob,
        }
    }
}

/// Scores knowledge factuality: the scoring prompt conditions on the question
/// and demonstrations, and the backend reports per-token log-probabilities of
/// the knowledge as its continuation.
pub fn factuality_score(
    backend: &dyn Backend,
    cfg: &LoopConfig,
    knowledge: &str,
    question: &str,
    demos: &[Demonstration],
) -> Result<FactualityResult, ScoreError> {
    if question.trim().is_empty() {
        return Err(ScoreError::EmptyInput { what: "question" });
    }
    if knowledge.trim().is_empty() {
        return Err(ScoreError::EmptyInput { what: "knowledge" });
    }
    let prompt = prompts::render_factuality_prompt(question, demos)?;
    let scores = backend.score_tokens(&prompt, knowledge)?;
    if scores.is_empty() {
        return Err(ScoreError::ZeroTokens);
    }
    let sum: f64 = scores.iter().map(|t| t.logprob).sum();
    let count = scores.len();
    let mean = sum / count as f64;
    let gate_value = match cfg.factuality_gate {
        FactualityGate::Sum => sum,
        FactualityGate::Mean => mean,
    };
    Ok(FactualityResult {
        sum_logprob: sum,
        mean_logprob: mean,
        token_count: count,
        passed: gate_value >= cfg.threshold_factual,
    })
}

/// Consistency of an answer with a knowledge string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    /// Mean over the per-sentence scores.
    pub score: f64,
    /// Mean token log-probability of each answer sentence, in order.
    pub per_sentence: Vec<f64>,
    pub passed: bool,
}

/// The (prompt, continuation) pairs consistency scoring sends to the backend:
/// one per answer sentence. The prompt is the knowledge, a newline, and the
/// raw answer text preceding the sentence; the continuation is the trimmed
/// sentence itself.
pub fn consistency_requests(answer: &str, knowledge: &str) -> Vec<(String, String)> {
    split_sentence_spans(answer)
        .into_iter()
        .filter_map(|span| {
            let sentence = answer[span.clone()].trim();
            if sentence.is_empty() {
                return None;
            }
            let prefix = &answer[..span.start];
            Some((format!("{knowledge}\n{prefix}"), sentence.to_string()))
        })
        .collect()
}

/// Scores answer consistency: each sentence's mean token log-probability
/// conditioned on the knowledge and the preceding answer text, averaged over
/// sentences.
pub fn consistency_score(
    backend: &dyn Backend,
    cfg: &LoopConfig,
    answer: &str,
    knowledge: &str,
) -> Result<ConsistencyResult, ScoreError> {
    if knowledge.trim().is_empty() {
        return Err(ScoreError::EmptyInput { what: "knowledge" });
    }
    let requests = consistency_requests(answer, knowledge);
    if requests.is_empty() {
        return Err(ScoreError::EmptyInput { what: "answer" });
    }
    let mut per_sentence = Vec::with_capacity(requests.len());
    for (prompt, continuation) in &requests {
        let scores = backend.score_tokens(prompt, continuation)?;
        if scores.is_empty() {
            return Err(ScoreError::ZeroTokens);
        }
        let sum: f64 = scores.iter().map(|t| t.logprob).sum();
        per_sentence.push(sum / scores.len() as f64);
    }
    let score = per_sentence.iter().sum::<f64>() / per_sentence.len() as f64;
    Ok(ConsistencyResult {
        score,
        per_sentence,
        passed: score >= cfg.threshold_consistency,
    })
}

/// Question-answer alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentResult {
    pub cosine: f64,
    pub passed: bool,
}

/// Cosine similarity between the question and answer embeddings. Backends
/// return unit vectors, so this is their dot product.
pub fn entailment_score(
    backend: &dyn Backend,
    cfg: &LoopConfig,
    question: &str,
    answer: &str,
) -> Result<EntailmentResult, ScoreError> {
    if question.trim().is_empty() {
        return Err(ScoreError::EmptyInput { what: "question" });
    }
    if answer.trim().is_empty() {
        return Err(ScoreError::EmptyInput { what: "answer" });
    }
    let q = backend.embed(question)?;
    let a = backend.embed(answer)?;
    if q.len() != a.len() {
        return Err(ScoreError::DimensionMismatch {
            left: q.len(),
            right: a.len(),
        });
    }
    let cosine: f64 = q.iter().zip(&a).map(|(x, y)| x * y).sum();
    Ok(EntailmentResult {
        cosine,
        passed: cosine >= cfg.threshold_entailment,
    })
}
