//! Transparent retry for transient backend failures.
//!
//! Only [`BackendError::Unreachable`] is retried; refusals and contract
//! violations surface immediately. Delays grow exponentially from
//! `base_delay`, doubling per attempt.

use std::time::Duration;

use super::{Backend, BackendError, NliLabel, TokenScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first failed attempt (so max_retries = 3 allows
    /// four attempts in total).
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(100),
        }
    }
}

/// Wraps any backend with the retry policy.
pub struct RetryBackend<B> {
    inner: B,
    policy: RetryPolicy,
}

impl<B: Backend> RetryBackend<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        RetryBackend { inner, policy }
    }

    fn with_retry<T>(
        &self,
        mut call: impl FnMut(&B) -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match call(&self.inner) {
                Ok(value) => return Ok(value),
                Err(err) if err.is_transient() && attempt < self.policy.max_retries => {
                    let delay = self.policy.base_delay * 2u32.saturating_pow(attempt);
                    log::warn!("transient backend failure (attempt {}): {err}; retrying", attempt + 1);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}

impl<B: Backend> Backend for RetryBackend<B> {
    fn complete(&self, prompt: &str, max_new_tokens: usize) -> Result<String, BackendError> {
        self.with_retry(|b| b.complete(prompt, max_new_tokens))
    }

    fn score_tokens(
        &self,
        prompt: &str,
        continuation: &str,
    ) -> Result<Vec<TokenScore>, BackendError> {
        self.with_retry(|b| b.score_tokens(prompt, continuation))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.with_retry(|b| b.embed(text))
    }

    fn nli_classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, BackendError> {
        self.with_retry(|b| b.nli_classify(premise, hypothesis))
    }
}
