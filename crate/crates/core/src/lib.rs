//! Generate-score-refine orchestration for grounded question answering.
//!
//! The pipeline drafts background knowledge for a question, gates it on a
//! token-logprob factuality score, answers from the accepted knowledge, gates
//! the answer on knowledge consistency, and finally checks that the answer
//! entails the question via embedding similarity. Any failed gate triggers a
//! scored refinement prompt; a failed entailment check restarts the whole
//! cycle, up to configured caps.
//!
//! Module map:
//! - [`types`] / [`config`]: shared data types and the loop configuration.
//! - [`prompts`]: the versioned prompt templates and demonstration set.
//! - [`backend`]: the model-capability contract, scripted mock, HTTP binding.
//! - [`scorers`]: factuality, consistency, and entailment gate scorers.
//! - [`reflect`]: the loop controller and trace validator.
//! - [`trace`]: trace event types and their on-disk form.
//! - [`metrics`]: corpus evaluation (overlap metrics, NLI labels, consistency).
//! - [`data`]: dataset manifests, loaders, and the interchange format.
//! - [`runner`]: batch execution, persistence, resume, and reporting.
//! - [`fixtures`]: deterministic synthetic corpora and mock-script builders.

pub mod backend;
pub mod config;
pub mod data;
pub mod fixtures;
pub mod metrics;
pub mod prompts;
pub mod reflect;
pub mod runner;
pub mod scorers;
pub mod trace;
pub mod types;
