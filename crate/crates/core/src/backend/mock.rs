//! Deterministic scripted backend.
//!
//! A script is a JSON document mapping request fingerprints (see
//! [`BackendRequest::fingerprint`]) to canned responses. Entries may carry an
//! echo of the original request for human inspection; the loader recomputes
//! the fingerprint of every echo, so a script built against stale prompt
//! templates fails loudly instead of silently missing lookups.
//!
//! Miss behavior is part of the contract: complete, score_tokens, and embed
//! return `Refused` for an unscripted request; nli_classify returns the
//! documented default of `Neutral`. The mock tokenizes on ASCII whitespace
//! where the contract needs a token count.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    require_nonempty, sanitize_embedding, sanitize_token_scores, Backend, BackendError,
    BackendRequest, Capability, NliLabel, TokenScore,
};

/// Canned response for one request. The same shape is used on the HTTP wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CapabilityResponse {
    Complete { text: String },
    ScoreTokens { tokens: Vec<TokenScore> },
    Embed { vector: Vec<f64> },
    NliClassify { label: NliLabel },
}

impl CapabilityResponse {
    fn kind(&self) -> Capability {
        match self {
            CapabilityResponse::Complete { .. } => Capability::Complete,
            CapabilityResponse::ScoreTokens { .. } => Capability::ScoreTokens,
            CapabilityResponse::Embed { .. } => Capability::Embed,
            CapabilityResponse::NliClassify { .. } => Capability::NliClassify,
        }
    }
}

/// One script entry: the canned response, plus an optional request echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<BackendRequest>,
    pub response: CapabilityResponse,
}

/// On-disk mock script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    /// Format version; currently always 1.
    pub version: u32,
    /// Fingerprint -> entry. BTreeMap keeps serialization deterministic.
    pub entries: BTreeMap<String, ScriptEntry>,
}

impl Default for MockScript {
    fn default() -> Self {
        MockScript {
            version: 1,
            entries: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum MockScriptError {
    #[error("cannot read mock script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse mock script: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("mock script version {0} is not supported (expected 1)")]
    Version(u32),
    #[error("script entry {key} echoes a request whose fingerprint is {actual}")]
    FingerprintMismatch { key: String, actual: String },
    #[error("script entry {key} answers a {request} request with a {response} response")]
    KindMismatch {
        key: String,
        request: Capability,
        response: Capability,
    },
}

impl MockScript {
    /// Parses and validates a script document.
    pub fn from_json(text: &str) -> Result<Self, MockScriptError> {
        let script: MockScript = serde_json::from_str(text)?;
        script.check()?;
        Ok(script)
    }

    pub fn from_file(path: &Path) -> Result<Self, MockScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| MockScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("script serializes");
        out.push('\n');
        out
    }

    fn check(&self) -> Result<(), MockScriptError> {
        if self.version != 1 {
            return Err(MockScriptError::Version(self.version));
        }
        for (key, entry) in &self.entries {
            if let Some(request) = &entry.request {
                let actual = request.fingerprint();
                if actual != *key {
                    return Err(MockScriptError::FingerprintMismatch {
                        key: key.clone(),
                        actual,
                    });
                }
                if request.kind != entry.response.kind() {
                    return Err(MockScriptError::KindMismatch {
                        key: key.clone(),
                        request: request.kind,
                        response: entry.response.kind(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Incrementally assembles a [`MockScript`], fingerprinting each request and
/// keeping the request echo for inspection.
#[derive(Debug, Default)]
pub struct ScriptBuilder {
    script: MockScript,
}

impl ScriptBuilder {
    pub fn new() -> Self {
        ScriptBuilder::default()
    }

    fn insert(&mut self, request: BackendRequest, response: CapabilityResponse) {
        let key = request.fingerprint();
        self.script.entries.insert(
            key,
            ScriptEntry {
                request: Some(request),
                response,
            },
        );
    }

    pub fn complete(&mut self, prompt: &str, text: &str) -> &mut Self {
        self.insert(
            BackendRequest::complete(prompt),
            CapabilityResponse::Complete { text: text.to_string() },
        );
        self
    }

    /// Scripts a score_tokens response with explicit per-token logprobs. The
    /// continuation is tokenized on whitespace; `logprobs` must match.
    pub fn score_tokens(&mut self, prompt: &str, continuation: &str, logprobs: &[f64]) -> &mut Self {
        let words: Vec<&str> = continuation.split_whitespace().collect();
        assert_eq!(
            words.len(),
            logprobs.len(),
            "continuation has {} whitespace tokens but {} logprobs were scripted",
            words.len(),
            logprobs.len()
        );
        let tokens = words
            .iter()
            .zip(logprobs)
            .map(|(w, lp)| TokenScore {
                token: w.to_string(),
                logprob: *lp,
            })
            .collect();
        self.insert(
            BackendRequest::score_tokens(prompt, continuation),
            CapabilityResponse::ScoreTokens { tokens },
        );
        self
    }

    pub fn embed(&mut self, text: &str, vector: &[f64]) -> &mut Self {
        self.insert(
            BackendRequest::embed(text),
            CapabilityResponse::Embed {
                vector: vector.to_vec(),
            },
        );
        self
    }

    pub fn nli(&mut self, premise: &str, hypothesis: &str, label: NliLabel) -> &mut Self {
        self.insert(
            BackendRequest::nli(premise, hypothesis),
            CapabilityResponse::NliClassify { label },
        );
        self
    }

    /// Merges every entry of `other` into this script.
    pub fn merge(&mut self, other: MockScript) -> &mut Self {
        self.script.entries.extend(other.entries);
        self
    }

    pub fn build(&self) -> MockScript {
        self.script.clone()
    }

    pub fn into_script(self) -> MockScript {
        self.script
    }
}

/// A backend that replays a [`MockScript`].
#[derive(Debug)]
pub struct ScriptedBackend {
    script: MockScript,
}

impl ScriptedBackend {
    pub fn new(script: MockScript) -> Self {
        ScriptedBackend { script }
    }

    pub fn from_file(path: &Path) -> Result<Self, MockScriptError> {
        Ok(ScriptedBackend::new(MockScript::from_file(path)?))
    }

    fn lookup(&self, request: &BackendRequest) -> Option<&CapabilityResponse> {
        self.script
            .entries
            .get(&request.fingerprint())
            .map(|e| &e.response)
    }

    fn refused(request: &BackendRequest) -> BackendError {
        BackendError::Refused {
            reason: format!(
                "no scripted response for {} request {}",
                request.kind,
                request.fingerprint()
            ),
        }
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, prompt: &str, max_new_tokens: usize) -> Result<String, BackendError> {
        require_nonempty("prompt", prompt)?;
        let request = BackendRequest::complete(prompt);
        match self.lookup(&request) {
            Some(CapabilityResponse::Complete { text }) => {
                // Honor the length contract under the mock's whitespace
                // tokenization; canned fixtures are normally well under it.
                let words: Vec<&str> = text.split_whitespace().collect();
                if words.len() > max_new_tokens {
                    log::warn!(
                        "scripted completion has {} tokens, truncating to {max_new_tokens}",
                        words.len()
                    );
                    return Ok(words[..max_new_tokens].join(" "));
                }
                Ok(text.clone())
            }
            Some(other) => Err(BackendError::InvalidResponse {
                reason: format!("scripted {} response to a complete request", other.kind()),
            }),
            None => Err(Self::refused(&request)),
        }
    }

    fn score_tokens(
        &self,
        prompt: &str,
        continuation: &str,
    ) -> Result<Vec<TokenScore>, BackendError> {
        require_nonempty("prompt", prompt)?;
        require_nonempty("continuation", continuation)?;
        let request = BackendRequest::score_tokens(prompt, continuation);
        match self.lookup(&request) {
            Some(CapabilityResponse::ScoreTokens { tokens }) => {
                Ok(sanitize_token_scores(tokens.clone()))
            }
            Some(other) => Err(BackendError::InvalidResponse {
                reason: format!("scripted {} response to a score_tokens request", other.kind()),
            }),
            None => Err(Self::refused(&request)),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        require_nonempty("text", text)?;
        let request = BackendRequest::embed(text);
        match self.lookup(&request) {
            Some(CapabilityResponse::Embed { vector }) => sanitize_embedding(vector.clone()),
            Some(other) => Err(BackendError::InvalidResponse {
                reason: format!("scripted {} response to an embed request", other.kind()),
            }),
            None => Err(Self::refused(&request)),
        }
    }

    fn nli_classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, BackendError> {
        require_nonempty("premise", premise)?;
        require_nonempty("hypothesis", hypothesis)?;
        let request = BackendRequest::nli(premise, hypothesis);
        match self.lookup(&request) {
            Some(CapabilityResponse::NliClassify { label }) => Ok(*label),
            Some(other) => Err(BackendError::InvalidResponse {
                reason: format!("scripted {} response to an nli_classify request", other.kind()),
            }),
            // Documented default: unscripted premise/hypothesis pairs are neutral.
            None => Ok(NliLabel::Neutral),
        }
    }
}
