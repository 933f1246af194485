//! Reflection traces: a typed event log for one example's run.
//!
//! Traces persist as JSON Lines: a header line carrying the example id, one
//! compact line per event, and a footer line with the outcome. A file without
//! its footer is incomplete (the run died mid-example) and never parses, which
//! is what resume detection relies on.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One step of a reflection run. `revision` counts refinements within a main
/// pass, starting at 0 for the initial generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    KnowledgeGenerated {
        text: String,
        revision: u32,
    },
    KnowledgeScored {
        sum_logprob: f64,
        mean_logprob: f64,
        token_count: usize,
        /// The value compared against the factuality threshold (mean or sum,
        /// per configuration).
        score: f64,
        passed: bool,
    },
    KnowledgeRefined {
        text: String,
        revision: u32,
        /// The refinement instruction verbatim, as appended to the prompt.
        instruction: String,
    },
    AnswerGenerated {
        text: String,
        revision: u32,
    },
    AnswerScored {
        score: f64,
        sentence_count: usize,
        passed: bool,
    },
    AnswerRefined {
        text: String,
        revision: u32,
        instruction: String,
    },
    EntailmentScored {
        cosine: f64,
        passed: bool,
    },
    /// Emitted when a new main pass begins; `main_iter` is the new pass
    /// number (2-based: the first pass has no restart event).
    MainLoopRestarted {
        main_iter: u32,
    },
    Converged,
    UnconvergedBestEffort,
}

impl TraceEvent {
    /// Terminal events end a trace; exactly one appears, last.
    pub fn is_terminal(&self) -> bool {
        matches!(self, TraceEvent::Converged | TraceEvent::UnconvergedBestEffort)
    }
}

/// How much work the loops did: the number of main passes, and the maximum
/// per-pass knowledge and answer generation counts (initial generation plus
/// refinements).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopCounters {
    pub main: u32,
    pub knowledge: u32,
    pub answer: u32,
}

/// The full record of one example's reflection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionTrace {
    pub example_id: String,
    pub events: Vec<TraceEvent>,
    pub final_answer: String,
    pub converged: bool,
    pub loop_counters: LoopCounters,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace is empty")]
    Empty,
    #[error("trace is incomplete: {reason}")]
    Incomplete { reason: String },
    #[error("trace line {line} is malformed: {source}")]
    Malformed {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    example_id: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Footer {
    final_answer: String,
    converged: bool,
    loop_counters: LoopCounters,
}

impl ReflectionTrace {
    /// Serializes to the JSONL trace format: header, one line per event,
    /// footer. Ends with a newline.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = Header {
            example_id: self.example_id.clone(),
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("event serializes"));
            out.push('\n');
        }
        let footer = Footer {
            final_answer: self.final_answer.clone(),
            converged: self.converged,
            loop_counters: self.loop_counters,
        };
        out.push_str(&serde_json::to_string(&footer).expect("footer serializes"));
        out.push('\n');
        out
    }

    /// Parses the JSONL trace format. A missing footer is `Incomplete`, not
    /// malformed: it marks a run that died mid-example.
    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty())
            .collect();
        if lines.is_empty() {
            return Err(TraceError::Empty);
        }
        let (header_no, header_line) = lines[0];
        let header: Header =
            serde_json::from_str(header_line).map_err(|source| TraceError::Malformed {
                line: header_no,
                source,
            })?;
        if lines.len() < 2 {
            return Err(TraceError::Incomplete {
                reason: "no footer line".to_string(),
            });
        }
        let (last_no, last_line) = lines[lines.len() - 1];
        let footer: Footer = match serde_json::from_str(last_line) {
            Ok(f) => f,
            Err(_) => {
                // The last line is an event (or garbage from a truncated
                // write): the footer never made it to disk.
                return Err(TraceError::Incomplete {
                    reason: format!("line {last_no} is not a footer"),
                });
            }
        };
        let mut events = Vec::with_capacity(lines.len() - 2);
        for &(no, line) in &lines[1..lines.len() - 1] {
            let event: TraceEvent =
                serde_json::from_str(line).map_err(|source| TraceError::Malformed {
                    line: no,
                    source,
                })?;
            events.push(event);
        }
        Ok(ReflectionTrace {
            example_id: header.example_id,
            events,
            final_answer: footer.final_answer,
            converged: footer.converged,
            loop_counters: footer.loop_counters,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, TraceError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(&text)
    }
}
