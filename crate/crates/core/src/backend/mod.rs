//! Model-capability contract.
//!
//! The pipeline needs exactly four capabilities: text completion, token-level
//! scoring of a continuation, sentence embedding, and NLI classification. Any
//! binding that provides them (scripted mock, HTTP endpoint) plugs in behind
//! the [`Backend`] trait. Implementations must be safe to call from several
//! worker threads at once, and identical inputs must yield identical outputs
//! within a session.

pub mod http;
pub mod mock;
pub mod retry;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// One scored token of a continuation, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    /// Log-probability of the token given everything before it; never > 0.
    pub logprob: f64,
}

/// Three-way entailment label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entail,
    Neutral,
    Contradict,
}

impl NliLabel {
    /// Numeric value used by the evaluation protocol: entail 1, neutral 0,
    /// contradict -1.
    pub fn value(self) -> i32 {
        match self {
            NliLabel::Entail => 1,
            NliLabel::Neutral => 0,
            NliLabel::Contradict => -1,
        }
    }
}

/// The four capabilities a backend can provide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Complete,
    ScoreTokens,
    Embed,
    NliClassify,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Capability::Complete => "complete",
            Capability::ScoreTokens => "score_tokens",
            Capability::Embed => "embed",
            Capability::NliClassify => "nli_classify",
        };
        f.write_str(s)
    }
}

/// A capability request in wire form. `prompt` carries the input text for
/// complete, score_tokens, and embed; nli_classify uses the premise and
/// hypothesis pair instead and leaves `prompt` empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub kind: Capability,
    #[serde(default)]
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premise: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<String>,
}

impl BackendRequest {
    pub fn complete(prompt: &str) -> Self {
        BackendRequest {
            kind: Capability::Complete,
            prompt: prompt.to_string(),
            continuation: None,
            premise: None,
            hypothesis: None,
        }
    }

    pub fn score_tokens(prompt: &str, continuation: &str) -> Self {
        BackendRequest {
            kind: Capability::ScoreTokens,
            prompt: prompt.to_string(),
            continuation: Some(continuation.to_string()),
            premise: None,
            hypothesis: None,
        }
    }

    pub fn embed(text: &str) -> Self {
        BackendRequest {
            kind: Capability::Embed,
            prompt: text.to_string(),
            continuation: None,
            premise: None,
            hypothesis: None,
        }
    }

    pub fn nli(premise: &str, hypothesis: &str) -> Self {
        BackendRequest {
            kind: Capability::NliClassify,
            prompt: String::new(),
            continuation: None,
            premise: Some(premise.to_string()),
            hypothesis: Some(hypothesis.to_string()),
        }
    }

    /// Stable content hash that keys mock scripts: SHA-256 over the kind and
    /// every text field, separated by a 0x1f unit separator so field
    /// boundaries cannot be forged by crafted text.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.kind.to_string().as_bytes());
        for field in [
            Some(&self.prompt),
            self.continuation.as_ref(),
            self.premise.as_ref(),
            self.hypothesis.as_ref(),
        ] {
            hasher.update([0x1f]);
            if let Some(text) = field {
                hasher.update(text.as_bytes());
            }
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// Typed backend failures. Only `Unreachable` is transient and retryable.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    /// Network-level or service-level failure; safe to retry.
    #[error("backend unreachable: {reason}")]
    Unreachable { reason: String },
    /// The backend rejected the request (content policy, malformed prompt,
    /// or an unscripted request on the mock). Never retried.
    #[error("backend refused request: {reason}")]
    Refused { reason: String },
    /// The binding does not provide this capability at all.
    #[error("backend does not support capability {capability}")]
    UnsupportedCapability { capability: Capability },
    /// Caller violated the nonempty-input precondition.
    #[error("empty input: {what}")]
    EmptyInput { what: &'static str },
    /// The backend answered with something that violates the contract.
    #[error("invalid backend response: {reason}")]
    InvalidResponse { reason: String },
}

impl BackendError {
    /// Whether a retry could plausibly succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Unreachable { .. })
    }
}

/// The capability contract every binding implements.
pub trait Backend: Send + Sync {
    /// Generates a continuation of `prompt`, at most `max_new_tokens` tokens
    /// under the backend's own tokenization.
    fn complete(&self, prompt: &str, max_new_tokens: usize) -> Result<String, BackendError>;

    /// Scores `continuation` token by token given `prompt`, one entry per
    /// token of the continuation under the backend's tokenization.
    fn score_tokens(&self, prompt: &str, continuation: &str)
        -> Result<Vec<TokenScore>, BackendError>;

    /// Embeds `text` as a unit-norm vector (Euclidean norm 1 within 1e-6).
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;

    /// Classifies whether `premise` entails `hypothesis`.
    fn nli_classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, BackendError>;
}

pub(crate) fn require_nonempty(what: &'static str, text: &str) -> Result<(), BackendError> {
    if text.is_empty() {
        Err(BackendError::EmptyInput { what })
    } else {
        Ok(())
    }
}

/// Clamps positive logprobs to 0, warning once per offending token. A logprob
/// above 0 is always a provider bug, but one not worth failing a run over.
pub(crate) fn sanitize_token_scores(mut tokens: Vec<TokenScore>) -> Vec<TokenScore> {
    for t in &mut tokens {
        if t.logprob > 0.0 {
            log::warn!("clamping positive logprob {} for token {:?} to 0", t.logprob, t.token);
            t.logprob = 0.0;
        }
    }
    tokens
}

/// Validates an embedding: finite, nonzero, unit norm within 1e-6. Vectors
/// off by more than the tolerance are renormalized with a warning; zero or
/// non-finite vectors are rejected.
pub(crate) fn sanitize_embedding(mut vector: Vec<f64>) -> Result<Vec<f64>, BackendError> {
    if vector.is_empty() {
        return Err(BackendError::InvalidResponse {
            reason: "embedding is empty".to_string(),
        });
    }
    if vector.iter().any(|x| !x.is_finite()) {
        return Err(BackendError::InvalidResponse {
            reason: "embedding contains a non-finite component".to_string(),
        });
    }
    let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(BackendError::InvalidResponse {
            reason: "embedding has zero norm".to_string(),
        });
    }
    if (norm - 1.0).abs() > 1e-6 {
        log::warn!("renormalizing embedding with norm {norm}");
        for x in &mut vector {
            *x /= norm;
        }
    }
    Ok(vector)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprints_are_stable_and_distinct() {
        let a = BackendRequest::complete("hello").fingerprint();
        let b = BackendRequest::complete("hello").fingerprint();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);

        let c = BackendRequest::complete("hello ").fingerprint();
        assert_ne!(a, c);
        // Same text through a different capability is a different request.
        let d = BackendRequest::embed("hello").fingerprint();
        assert_ne!(a, d);
    }

    #[test]
    fn fingerprint_fields_cannot_bleed_together() {
        let a = BackendRequest::score_tokens("ab", "c").fingerprint();
        let b = BackendRequest::score_tokens("a", "bc").fingerprint();
        assert_ne!(a, b);
        let c = BackendRequest::nli("ab", "c").fingerprint();
        let d = BackendRequest::nli("a", "bc").fingerprint();
        assert_ne!(c, d);
    }

    #[test]
    fn nli_label_values_match_the_protocol() {
        assert_eq!(NliLabel::Entail.value(), 1);
        assert_eq!(NliLabel::Neutral.value(), 0);
        assert_eq!(NliLabel::Contradict.value(), -1);
    }

    #[test]
    fn positive_logprobs_clamp_to_zero() {
        let tokens = sanitize_token_scores(vec![
            TokenScore { token: "a".to_string(), logprob: 0.1 },
            TokenScore { token: "b".to_string(), logprob: -0.5 },
        ]);
        assert_eq!(tokens[0].logprob, 0.0);
        assert_eq!(tokens[1].logprob, -0.5);
    }

    #[test]
    fn embeddings_are_checked_and_renormalized() {
        // Unit vector passes through untouched.
        let v = sanitize_embedding(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0]);
        // Off-norm vectors are renormalized.
        let v = sanitize_embedding(vec![3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12);
        assert!((v[1] - 0.8).abs() < 1e-12);
        // Degenerate vectors are rejected.
        assert!(sanitize_embedding(vec![0.0, 0.0]).is_err());
        assert!(sanitize_embedding(vec![f64::NAN]).is_err());
        assert!(sanitize_embedding(vec![]).is_err());
    }

    #[test]
    fn request_wire_shape_is_minimal() {
        let req = BackendRequest::score_tokens("p", "c");
        let json = serde_json::to_string(&req).unwrap();
        assert_eq!(json, r#"{"kind":"score_tokens","prompt":"p","continuation":"c"}"#);

        let req = BackendRequest::nli("a", "b");
        let json = serde_json::to_string(&req).unwrap();
        assert_eq!(
            json,
            r#"{"kind":"nli_classify","prompt":"","premise":"a","hypothesis":"b"}"#
        );
    }
}
