//! The reflection controller: generate knowledge, gate it on factuality,
//! generate an answer, gate it on consistency, then gate the pair on
//! question-answer entailment. Failing inner gates trigger refinement (up to
//! a cap); a failing outer gate restarts the whole cycle from scratch. A run
//! that exhausts every pass returns its best answer unconverged.
//!
//! Refinement is conversational: the next prompt is the prior prompt, the
//! prior output, a refinement instruction, and a generation cue, so the model
//! sees its own earlier attempt.

use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::config::{Ablation, FactualityGate, LoopConfig};
use crate::prompts::{self, names, PromptError};
use crate::scorers::{self, ScoreError};
use crate::trace::{LoopCounters, ReflectionTrace, TraceEvent};
use crate::types::{Demonstration, QAExample};

/// Generation budget per completion call when the caller does not configure
/// one.
pub const DEFAULT_MAX_NEW_TOKENS: usize = 512;

/// Builds a refinement prompt: the transcript so far, the instruction, and a
/// cue for the next generation.
pub fn refine_prompt(prior_prompt: &str, prior_output: &str, instruction: &str, cue: &str) -> String {
    format!("{prior_prompt}\n{prior_output}\n\n{instruction}\n\n{cue}")
}

#[derive(Debug, Error)]
pub enum ReflectError {
    #[error("invalid configuration: {problems}")]
    InvalidConfig { problems: String },
    #[error("invalid example: {problems}")]
    InvalidExample { problems: String },
    #[error("model returned an empty {what}")]
    EmptyGeneration { what: &'static str },
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// A failed run, with whatever events had accumulated before the error; the
/// partial event log is what makes backend failures diagnosable.
#[derive(Debug, Error)]
#[error("reflection failed for example {example_id}: {error}")]
pub struct ReflectionFailure {
    pub example_id: String,
    #[source]
    pub error: ReflectError,
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionOutcome {
    pub final_answer: String,
    pub trace: ReflectionTrace,
}

/// One completed main pass, for best-effort selection when nothing converges:
/// ranked by entailment cosine, then consistency (absent scores rank lowest),
/// earliest pass winning ties.
struct PassOutcome {
    answer: String,
    consistency: Option<f64>,
    cosine: f64,
}

impl PassOutcome {
    fn beats(&self, other: &PassOutcome) -> bool {
        let mine = self.consistency.unwrap_or(f64::NEG_INFINITY);
        let theirs = other.consistency.unwrap_or(f64::NEG_INFINITY);
        self.cosine > other.cosine || (self.cosine == other.cosine && mine > theirs)
    }
}

struct Controller<'a> {
    example: &'a QAExample,
    cfg: &'a LoopConfig,
    backend: &'a dyn Backend,
    demos: &'a [Demonstration],
    max_new_tokens: usize,
    events: Vec<TraceEvent>,
}

impl Controller<'_> {
    fn complete(&self, prompt: &str, what: &'static str) -> Result<String, ReflectError> {
        let text = self.backend.complete(prompt, self.max_new_tokens)?;
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(ReflectError::EmptyGeneration { what });
        }
        Ok(trimmed.to_string())
    }

    fn knowledge_instruction(&self, score: f64) -> Result<String, ReflectError> {
        let rendered = match self.cfg.ablation {
            Ablation::Full => prompts::render(names::KNOWLEDGE_REFINE, &[
                ("score", prompts::format_score(score).as_str()),
                (
                    "threshold",
                    prompts::format_threshold(self.cfg.threshold_factual).as_str(),
                ),
            ]),
            Ablation::NoAspect => prompts::render(names::KNOWLEDGE_REFINE_NO_ASPECT, &[]),
            Ablation::NoScoreNumber => prompts::render(names::KNOWLEDGE_REFINE_NO_NUM, &[]),
            Ablation::NoRefinement => unreachable!("refinement is disabled in this ablation"),
        };
        Ok(rendered?)
    }

    fn answer_instruction(&self, score: f64) -> Result<String, ReflectError> {
        let rendered = match self.cfg.ablation {
            Ablation::Full => prompts::render(names::ANSWER_REFINE, &[
                ("score", prompts::format_score(score).as_str()),
                (
                    "threshold",
                    prompts::format_threshold(self.cfg.threshold_consistency).as_str(),
                ),
            ]),
            Ablation::NoAspect => prompts::render(names::ANSWER_REFINE_NO_ASPECT, &[]),
            Ablation::NoScoreNumber => prompts::render(names::ANSWER_REFINE_NO_NUM, &[]),
            Ablation::NoRefinement => unreachable!("refinement is disabled in this ablation"),
        };
        Ok(rendered?)
    }

    fn run(&mut self) -> Result<(String, bool, LoopCounters), ReflectError> {
        let question = self.example.question.as_str();
        let skip_inner_gates = self.cfg.ablation == Ablation::NoRefinement;
        let mut best_overall: Option<PassOutcome> = None;
        let mut max_knowledge = 0u32;
        let mut max_answer = 0u32;
        let mut passes_run = 0u32;

        for main_iter in 1..=self.cfg.max_main_loop {
            passes_run = main_iter;
            if main_iter > 1 {
                self.events.push(TraceEvent::MainLoopRestarted { main_iter });
            }

            // Knowledge phase: generate, then score-refine until the gate
            // passes or the candidate budget runs out.
            let mut k_prompt = prompts::render(names::KNOWLEDGE_GEN, &[("question", question)])?;
            let mut knowledge = self.complete(&k_prompt, "knowledge")?;
            let mut k_count = 1u32;
            self.events.push(TraceEvent::KnowledgeGenerated {
                text: knowledge.clone(),
                revision: 0,
            });
            let mut k_clean = true;
            if !skip_inner_gates {
                k_clean = false;
                let mut best_k: Option<(f64, String)> = None;
                loop {
                    let fact = scorers::factuality_score(
                        self.backend,
                        self.cfg,
                        &knowledge,
                        question,
                        self.demos,
                    )?;
                    let gate = fact.gate_score(self.cfg.factuality_gate);
                    self.events.push(TraceEvent::KnowledgeScored {
                        sum_logprob: fact.sum_logprob,
                        mean_logprob: fact.mean_logprob,
                        token_count: fact.token_count,
                        score: gate,
                        passed: fact.passed,
                    });
                    if best_k.as_ref().is_none_or(|(s, _)| gate > *s) {
                        best_k = Some((gate, knowledge.clone()));
                    }
                    if fact.passed {
                        k_clean = true;
                        break;
                    }
                    if k_count >= self.cfg.max_knowledge_loop {
                        break;
                    }
                    let instruction = self.knowledge_instruction(gate)?;
                    let next_prompt = refine_prompt(&k_prompt, &knowledge, &instruction, "Knowledge:");
                    let refined = self.complete(&next_prompt, "knowledge")?;
                    k_count += 1;
                    self.events.push(TraceEvent::KnowledgeRefined {
                        text: refined.clone(),
                        revision: k_count - 1,
                        instruction,
                    });
                    k_prompt = next_prompt;
                    knowledge = refined;
                }
                if !k_clean {
                    // Budget exhausted: carry the best-scoring candidate into
                    // the answer phase rather than the last one.
                    knowledge = best_k.expect("gate scored at least one candidate").1;
                }
            }
            max_knowledge = max_knowledge.max(k_count);

            // Answer phase, same shape with the consistency gate.
            let mut a_prompt = prompts::render(names::ANSWER_GEN, &[
                ("knowledge", knowledge.as_str()),
                ("question", question),
            ])?;
            let mut answer = self.complete(&a_prompt, "answer")?;
            let mut a_count = 1u32;
            self.events.push(TraceEvent::AnswerGenerated {
                text: answer.clone(),
                revision: 0,
            });
            let mut a_clean = true;
            let mut final_consistency: Option<f64> = None;
            if !skip_inner_gates {
                a_clean = false;
                let mut best_a: Option<(f64, String)> = None;
                loop {
                    let cons =
                        scorers::consistency_score(self.backend, self.cfg, &answer, &knowledge)?;
                    self.events.push(TraceEvent::AnswerScored {
                        score: cons.score,
                        sentence_count: cons.per_sentence.len(),
                        passed: cons.passed,
                    });
                    if best_a.as_ref().is_none_or(|(s, _)| cons.score > *s) {
                        best_a = Some((cons.score, answer.clone()));
                    }
                    if cons.passed {
                        a_clean = true;
                        final_consistency = Some(cons.score);
                        break;
                    }
                    if a_count >= self.cfg.max_answer_loop {
                        break;
                    }
                    let instruction = self.answer_instruction(cons.score)?;
                    let next_prompt = refine_prompt(&a_prompt, &answer, &instruction, "Answer:");
                    let refined = self.complete(&next_prompt, "answer")?;
                    a_count += 1;
                    self.events.push(TraceEvent::AnswerRefined {
                        text: refined.clone(),
                        revision: a_count - 1,
                        instruction,
                    });
                    a_prompt = next_prompt;
                    answer = refined;
                }
                if !a_clean {
                    let (score, text) = best_a.expect("gate scored at least one candidate");
                    final_consistency = Some(score);
                    answer = text;
                }
            }
            max_answer = max_answer.max(a_count);

            // Outer gate: does the answer still address the question?
            let ent = scorers::entailment_score(self.backend, self.cfg, question, &answer)?;
            self.events.push(TraceEvent::EntailmentScored {
                cosine: ent.cosine,
                passed: ent.passed,
            });

            let outcome = PassOutcome {
                answer: answer.clone(),
                consistency: final_consistency,
                cosine: ent.cosine,
            };
            if best_overall.as_ref().is_none_or(|b| outcome.beats(b)) {
                best_overall = Some(outcome);
            }

            // Convergence needs a clean pass: every gate that ran this pass
            // passed. A pass that rode through on a best-effort candidate
            // restarts instead.
            if ent.passed && k_clean && a_clean {
                self.events.push(TraceEvent::Converged);
                let counters = LoopCounters {
                    main: passes_run,
                    knowledge: max_knowledge,
                    answer: max_answer,
                };
                return Ok((answer, true, counters));
            }
        }

        self.events.push(TraceEvent::UnconvergedBestEffort);
        let best = best_overall.expect("at least one pass ran");
        let counters = LoopCounters {
            main: passes_run,
            knowledge: max_knowledge,
            answer: max_answer,
        };
        Ok((best.answer, false, counters))
    }
}

/// Runs the reflection loops for one example with the default generation
/// budget.
pub fn run_reflection(
    example: &QAExample,
    cfg: &LoopConfig,
    backend: &dyn Backend,
    demos: &[Demonstration],
) -> Result<ReflectionOutcome, ReflectionFailure> {
    run_reflection_with(example, cfg, backend, demos, DEFAULT_MAX_NEW_TOKENS)
}

/// Runs the reflection loops for one example with an explicit per-call
/// generation budget.
pub fn run_reflection_with(
    example: &QAExample,
    cfg: &LoopConfig,
    backend: &dyn Backend,
    demos: &[Demonstration],
    max_new_tokens: usize,
) -> Result<ReflectionOutcome, ReflectionFailure> {
    let fail = |error: ReflectError| ReflectionFailure {
        example_id: example.id.clone(),
        error,
        events: Vec::new(),
    };
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(fail(ReflectError::InvalidConfig {
            problems: problems.join("; "),
        }));
    }
    if let Err(problem) = example.validate() {
        return Err(fail(ReflectError::InvalidExample { problems: problem }));
    }

    let mut controller = Controller {
        example,
        cfg,
        backend,
        demos,
        max_new_tokens,
        events: Vec::new(),
    };
    match controller.run() {
        Ok((final_answer, converged, loop_counters)) => Ok(ReflectionOutcome {
            final_answer: final_answer.clone(),
            trace: ReflectionTrace {
                example_id: example.id.clone(),
                events: controller.events,
                final_answer,
                converged,
                loop_counters,
            },
        }),
        Err(error) => Err(ReflectionFailure {
            example_id: example.id.clone(),
            error,
            events: controller.events,
        }),
    }
}

fn phase(event: &TraceEvent) -> Option<u8> {
    match event {
        TraceEvent::KnowledgeGenerated { .. }
        | TraceEvent::KnowledgeScored { .. }
        | TraceEvent::KnowledgeRefined { .. } => Some(1),
        TraceEvent::AnswerGenerated { .. }
        | TraceEvent::AnswerScored { .. }
        | TraceEvent::AnswerRefined { .. } => Some(2),
        TraceEvent::EntailmentScored { .. } => Some(3),
        _ => None,
    }
}

/// Checks a trace's internal invariants against a configuration. Returns one
/// message per violation; an empty list means the trace is well-formed.
pub fn validate_trace(trace: &ReflectionTrace, cfg: &LoopConfig) -> Vec<String> {
    let mut violations = Vec::new();
    let events = &trace.events;

    // Terminal discipline: exactly one, last, agreeing with the flag.
    let terminal_count = events.iter().filter(|e| e.is_terminal()).count();
    if terminal_count != 1 {
        violations.push(format!(
            "expected exactly one terminal event, found {terminal_count}"
        ));
    }
    match events.last() {
        Some(last) if last.is_terminal() => {
            let is_converged = matches!(last, TraceEvent::Converged);
            if trace.converged != is_converged {
                violations.push(format!(
                    "converged flag is {} but the terminal event says {}",
                    trace.converged, is_converged
                ));
            }
        }
        Some(_) => violations.push("last event is not terminal".to_string()),
        None => violations.push("trace has no events".to_string()),
    }

    if trace.final_answer.trim().is_empty() {
        violations.push("final answer is empty".to_string());
    }

    // Split the non-terminal body into main passes.
    let mut passes: Vec<Vec<&TraceEvent>> = vec![Vec::new()];
    let mut restart_iters = Vec::new();
    for event in events.iter().filter(|e| !e.is_terminal()) {
        if let TraceEvent::MainLoopRestarted { main_iter } = event {
            restart_iters.push(*main_iter);
            passes.push(Vec::new());
        } else {
            passes.last_mut().expect("non-empty").push(event);
        }
    }

    for (i, got) in restart_iters.iter().enumerate() {
        let want = i as u32 + 2;
        if *got != want {
            violations.push(format!(
                "main pass numbering: restart {} reports main_iter {got}, expected {want}",
                i + 1
            ));
        }
    }

    // Within a pass, knowledge work precedes answer work precedes the
    // entailment check.
    for (pi, pass) in passes.iter().enumerate() {
        let mut current = 0u8;
        for event in pass {
            if let Some(p) = phase(event) {
                if p < current {
                    violations.push(format!("phase order violated in pass {}", pi + 1));
                    break;
                }
                current = p;
            }
        }
    }

    // Adjacency: scores follow candidates; refinements follow failing scores.
    for (i, event) in events.iter().enumerate() {
        let prev = if i > 0 { Some(&events[i - 1]) } else { None };
        match event {
            TraceEvent::KnowledgeScored { .. } => {
                if !matches!(
                    prev,
                    Some(TraceEvent::KnowledgeGenerated { .. })
                        | Some(TraceEvent::KnowledgeRefined { .. })
                ) {
                    violations.push(format!(
                        "event {i}: knowledge scored without a preceding candidate"
                    ));
                }
            }
            TraceEvent::AnswerScored { .. } => {
                if !matches!(
                    prev,
                    Some(TraceEvent::AnswerGenerated { .. })
                        | Some(TraceEvent::AnswerRefined { .. })
                ) {
                    violations.push(format!(
                        "event {i}: answer scored without a preceding candidate"
                    ));
                }
            }
            TraceEvent::KnowledgeRefined { .. } => {
                if !matches!(prev, Some(TraceEvent::KnowledgeScored { passed: false, .. })) {
                    violations.push(format!(
                        "event {i}: knowledge refined without an immediately preceding failing score"
                    ));
                }
            }
            TraceEvent::AnswerRefined { .. } => {
                if !matches!(prev, Some(TraceEvent::AnswerScored { passed: false, .. })) {
                    violations.push(format!(
                        "event {i}: answer refined without an immediately preceding failing score"
                    ));
                }
            }
            _ => {}
        }
    }

    // Every recorded gate flag must match the threshold comparison, and the
    // recorded gate score must be the configured aggregate.
    for (i, event) in events.iter().enumerate() {
        match event {
            TraceEvent::KnowledgeScored {
                sum_logprob,
                mean_logprob,
                token_count,
                score,
                passed,
            } => {
                if *passed != (*score >= cfg.threshold_factual) {
                    violations.push(format!(
                        "event {i}: knowledge gate flag disagrees with the factuality threshold"
                    ));
                }
                let want = match cfg.factuality_gate {
                    FactualityGate::Mean => *mean_logprob,
                    FactualityGate::Sum => *sum_logprob,
                };
                if *score != want {
                    violations.push(format!(
                        "event {i}: knowledge gate score is not the configured aggregate"
                    ));
                }
                if (mean_logprob * *token_count as f64 - sum_logprob).abs() > 1e-9 {
                    violations.push(format!("event {i}: knowledge score sum/mean mismatch"));
                }
            }
            TraceEvent::AnswerScored { score, passed, .. } => {
                if *passed != (*score >= cfg.threshold_consistency) {
                    violations.push(format!(
                        "event {i}: answer gate flag disagrees with the consistency threshold"
                    ));
                }
            }
            TraceEvent::EntailmentScored { cosine, passed } => {
                if *passed != (*cosine >= cfg.threshold_entailment) {
                    violations.push(format!(
                        "event {i}: entailment gate flag disagrees with the threshold"
                    ));
                }
            }
            _ => {}
        }
    }

    // Gate soundness: a converged trace's last score of each kind passed.
    if trace.converged {
        let last_knowledge = events.iter().rev().find_map(|e| match e {
            TraceEvent::KnowledgeScored { passed, .. } => Some(*passed),
            _ => None,
        });
        if last_knowledge == Some(false) {
            violations.push("converged but the last knowledge gate failed".to_string());
        }
        let last_answer = events.iter().rev().find_map(|e| match e {
            TraceEvent::AnswerScored { passed, .. } => Some(*passed),
            _ => None,
        });
        if last_answer == Some(false) {
            violations.push("converged but the last answer gate failed".to_string());
        }
        let last_entailment = events.iter().rev().find_map(|e| match e {
            TraceEvent::EntailmentScored { passed, .. } => Some(*passed),
            _ => None,
        });
        if last_entailment == Some(false) {
            violations.push("converged but the last entailment gate failed".to_string());
        }
    }

    // Counters: recompute from events, then bound by configuration.
    let recomputed = LoopCounters {
        main: passes.len() as u32,
        knowledge: passes
            .iter()
            .map(|p| {
                p.iter()
                    .filter(|e| {
                        matches!(
                            e,
                            TraceEvent::KnowledgeGenerated { .. }
                                | TraceEvent::KnowledgeRefined { .. }
                        )
                    })
                    .count() as u32
            })
            .max()
            .unwrap_or(0),
        answer: passes
            .iter()
            .map(|p| {
                p.iter()
                    .filter(|e| {
                        matches!(
                            e,
                            TraceEvent::AnswerGenerated { .. } | TraceEvent::AnswerRefined { .. }
                        )
                    })
                    .count() as u32
            })
            .max()
            .unwrap_or(0),
    };
    if recomputed != trace.loop_counters {
        violations.push(format!(
            "recorded loop counters {:?} disagree with the events {:?}",
            trace.loop_counters, recomputed
        ));
    }
    if trace.loop_counters.main > cfg.max_main_loop {
        violations.push(format!(
            "main counter exceeds max ({} > {})",
            trace.loop_counters.main, cfg.max_main_loop
        ));
    }
    if trace.loop_counters.knowledge > cfg.max_knowledge_loop {
        violations.push(format!(
            "knowledge counter exceeds max ({} > {})",
            trace.loop_counters.knowledge, cfg.max_knowledge_loop
        ));
    }
    if trace.loop_counters.answer > cfg.max_answer_loop {
        violations.push(format!(
            "answer counter exceeds max ({} > {})",
            trace.loop_counters.answer, cfg.max_answer_loop
        ));
    }

    violations
}
