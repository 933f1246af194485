//! Loop configuration: thresholds, caps, and ablation switches.
//!
//! The on-disk form is a flat key/value TOML document with one key per field,
//! named exactly as the fields are. Any key can be overridden from the command
//! line as `key=value`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which pipeline stages are disabled for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// The full loop: all gates scored, refine prompts carry score and aspect.
    #[default]
    Full,
    /// Generation only: no factuality/consistency scoring, no refinement.
    NoRefinement,
    /// Refine prompts drop the aspect wording ("Please refine the knowledge.").
    NoAspect,
    /// Refine prompts drop the numeric score.
    NoScoreNumber,
}

/// Which statistic of the knowledge token logprobs gates the knowledge loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactualityGate {
    /// Length-normalized mean logprob (default).
    #[default]
    Mean,
    /// Raw summed logprob.
    Sum,
}

/// Thresholds, loop caps, demonstration count, and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub threshold_factual: f64,
    pub threshold_consistency: f64,
    pub threshold_entailment: f64,
    pub max_knowledge_loop: u32,
    pub max_answer_loop: u32,
    pub max_main_loop: u32,
    pub demo_count: u32,
    pub ablation: Ablation,
    pub factuality_gate: FactualityGate,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            threshold_factual: -1.0,
            threshold_consistency: -5.0,
            threshold_entailment: 0.8,
            max_knowledge_loop: 3,
            max_answer_loop: 3,
            max_main_loop: 3,
            demo_count: 1,
            ablation: Ablation::Full,
            factuality_gate: FactualityGate::Mean,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for config key {key:?}")]
    BadValue { key: String, value: String },
}

impl LoopConfig {
    /// Checks the configuration invariants; one message per violated field.
    /// An empty result means the configuration is valid.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.max_knowledge_loop < 1 {
            problems.push("max_knowledge_loop must be ≥ 1".to_string());
        }
        if self.max_answer_loop < 1 {
            problems.push("max_answer_loop must be ≥ 1".to_string());
        }
        if self.max_main_loop < 1 {
            problems.push("max_main_loop must be ≥ 1".to_string());
        }
        // demo_count only matters when the factuality scorer runs at all.
        if self.demo_count < 1 && self.ablation != Ablation::NoRefinement {
            problems.push("demo_count must be ≥ 1".to_string());
        }
        if !self.threshold_factual.is_finite() {
            problems.push("threshold_factual must be finite".to_string());
        }
        if !self.threshold_consistency.is_finite() {
            problems.push("threshold_consistency must be finite".to_string());
        }
        if !self.threshold_entailment.is_finite()
            || !(-1.0..=1.0).contains(&self.threshold_entailment)
        {
            problems.push("threshold_entailment out of [-1,1]".to_string());
        }
        problems
    }

    /// Parses the flat key/value document form.
    pub fn from_flat_str(s: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(s)?)
    }

    pub fn from_flat_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_flat_str(&text)
    }

    /// Serializes back to the flat document form.
    pub fn to_flat_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    /// Applies one `key=value` override, as given on the command line.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        match key {
            "threshold_factual" => self.threshold_factual = value.parse().map_err(|_| bad())?,
            "threshold_consistency" => {
                self.threshold_consistency = value.parse().map_err(|_| bad())?
            }
            "threshold_entailment" => {
                self.threshold_entailment = value.parse().map_err(|_| bad())?
            }
            "max_knowledge_loop" => self.max_knowledge_loop = value.parse().map_err(|_| bad())?,
            "max_answer_loop" => self.max_answer_loop = value.parse().map_err(|_| bad())?,
            "max_main_loop" => self.max_main_loop = value.parse().map_err(|_| bad())?,
            "demo_count" => self.demo_count = value.parse().map_err(|_| bad())?,
            "ablation" => {
                self.ablation = match value {
                    "full" => Ablation::Full,
                    "no_refinement" => Ablation::NoRefinement,
                    "no_aspect" => Ablation::NoAspect,
                    "no_score_number" => Ablation::NoScoreNumber,
                    _ => return Err(bad()),
                }
            }
            "factuality_gate" => {
                self.factuality_gate = match value {
                    "mean" => FactualityGate::Mean,
                    "sum" => FactualityGate::Sum,
                    _ => return Err(bad()),
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }
}
