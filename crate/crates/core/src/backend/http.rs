//! HTTP binding for remote backends.
//!
//! Wire contract (documented bit-exactly in docs/formats.md): every call is a
//! POST of one JSON [`BackendRequest`] to the endpoint URL; a successful reply
//! is HTTP 200 with one JSON [`CapabilityResponse`] whose `kind` matches the
//! request. Status mapping:
//!
//! - connect/timeout errors, 408, 429, and 5xx -> `Unreachable` (retryable)
//! - 501 -> `UnsupportedCapability`
//! - any other non-200 -> `Refused`, with the response body as the reason
//!
//! Generation-length limits and sampling parameters are deployment
//! configuration of the endpoint, not wire fields.

use std::time::Duration;

use super::mock::CapabilityResponse;
use super::{
    require_nonempty, sanitize_embedding, sanitize_token_scores, Backend, BackendError,
    BackendRequest, Capability, NliLabel, TokenScore,
};

pub struct HttpBackend {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: &str) -> Self {
        Self::with_timeout(endpoint, Duration::from_secs(120))
    }

    pub fn with_timeout(endpoint: &str, timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client builds");
        HttpBackend {
            endpoint: endpoint.to_string(),
            client,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn call(&self, request: &BackendRequest) -> Result<CapabilityResponse, BackendError> {
        let response = self
            .client
            .post(&self.endpoint)
            .json(request)
            .send()
            .map_err(|e| BackendError::Unreachable {
                reason: format!("request to {} failed: {e}", self.endpoint),
            })?;

        let status = response.status();
        let body = response.text().unwrap_or_default();
        if status.as_u16() == 501 {
            return Err(BackendError::UnsupportedCapability {
                capability: request.kind,
            });
        }
        if status.as_u16() == 408 || status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Unreachable {
                reason: format!("endpoint returned {status}: {body}"),
            });
        }
        if !status.is_success() {
            return Err(BackendError::Refused {
                reason: format!("endpoint returned {status}: {body}"),
            });
        }

        let parsed: CapabilityResponse =
            serde_json::from_str(&body).map_err(|e| BackendError::InvalidResponse {
                reason: format!("unparseable response body: {e}"),
            })?;
        let got = match &parsed {
            CapabilityResponse::Complete { .. } => Capability::Complete,
            CapabilityResponse::ScoreTokens { .. } => Capability::ScoreTokens,
            CapabilityResponse::Embed { .. } => Capability::Embed,
            CapabilityResponse::NliClassify { .. } => Capability::NliClassify,
        };
        if got != request.kind {
            return Err(BackendError::InvalidResponse {
                reason: format!("{} response to a {} request", got, request.kind),
            });
        }
        Ok(parsed)
    }
}

impl Backend for HttpBackend {
    fn complete(&self, prompt: &str, _max_new_tokens: usize) -> Result<String, BackendError> {
        require_nonempty("prompt", prompt)?;
        match self.call(&BackendRequest::complete(prompt))? {
            CapabilityResponse::Complete { text } => Ok(text),
            _ => unreachable!("kind checked in call"),
        }
    }

    fn score_tokens(
        &self,
        prompt: &str,
        continuation: &str,
    ) -> Result<Vec<TokenScore>, BackendError> {
        require_nonempty("prompt", prompt)?;
        require_nonempty("continuation", continuation)?;
        match self.call(&BackendRequest::score_tokens(prompt, continuation))? {
            CapabilityResponse::ScoreTokens { tokens } => {
                if tokens.is_empty() {
                    return Err(BackendError::InvalidResponse {
                        reason: "score_tokens returned no tokens".to_string(),
                    });
                }
                Ok(sanitize_token_scores(tokens))
            }
            _ => unreachable!("kind checked in call"),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        require_nonempty("text", text)?;
        match self.call(&BackendRequest::embed(text))? {
            CapabilityResponse::Embed { vector } => sanitize_embedding(vector),
            _ => unreachable!("kind checked in call"),
        }
    }

    fn nli_classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, BackendError> {
        require_nonempty("premise", premise)?;
        require_nonempty("hypothesis", hypothesis)?;
        match self.call(&BackendRequest::nli(premise, hypothesis))? {
            CapabilityResponse::NliClassify { label } => Ok(label),
            _ => unreachable!("kind checked in call"),
        }
    }
}
