//! Deterministic fixtures: a synthetic question corpus, fully scripted mock
//! backends for it, and a trajectory scripter that predicts every request the
//! reflection controller will make for a given score sequence.
//!
//! The scripter intentionally re-derives the controller's prompts and exit
//! rules instead of calling into it: a drift between the two shows up as an
//! unscripted request, which fails loudly.

use std::path::{Path, PathBuf};

use crate::backend::mock::{MockScript, ScriptBuilder};
use crate::backend::NliLabel;
use crate::config::{Ablation, LoopConfig};
use crate::data;
use crate::prompts::{self, names};
use crate::reflect::refine_prompt;
use crate::runner::{BackendBindings, BindingKind, BindingSpec, RunManifest, RunMode};
use crate::types::{QAExample, ShortLabel};

/// Size of the bundled desk corpus.
pub const DESK_COUNT: usize = 20;

fn desk_question(i: usize) -> String {
    format!("Does factor F{i} influence condition C{i}?")
}

fn desk_context(i: usize) -> String {
    format!("Clinical studies report that factor F{i} influences condition C{i} in a dose dependent manner.")
}

fn desk_reference(i: usize) -> String {
    format!("Factor F{i} influences condition C{i}.")
}

fn desk_knowledge(i: usize) -> String {
    format!("Published trials show that factor F{i} influences condition C{i}.")
}

fn desk_loop_answer(i: usize) -> String {
    desk_reference(i)
}

fn desk_baseline_answer(i: usize) -> String {
    if i % 2 == 0 {
        format!("It is unclear whether factor F{i} matters at all.")
    } else {
        format!("Factor F{i} does not influence condition C{i}.")
    }
}

/// A small synthetic clinical-style QA corpus with contexts and references.
pub fn desk_corpus(count: usize) -> Vec<QAExample> {
    (0..count)
        .map(|i| QAExample {
            id: format!("desk-{i:03}"),
            question: desk_question(i),
            context: Some(desk_context(i)),
            reference_answers: vec![desk_reference(i)],
            short_label: Some(ShortLabel::Yes),
        })
        .collect()
}

/// Scripts every request a loop run, a baseline run, and both evaluations
/// make over the desk corpus. Loop answers entail their contexts; baseline
/// answers alternate neutral and contradicting, so the loop's entailment
/// means beat the baseline's by construction.
pub fn build_desk_script(count: usize) -> MockScript {
    let cfg = LoopConfig::default();
    let demos = &prompts::default_demonstrations()[..cfg.demo_count as usize];
    let mut b = ScriptBuilder::new();
    for i in 0..count {
        let q = desk_question(i);
        let ctx = desk_context(i);
        let k = desk_knowledge(i);
        let a = desk_loop_answer(i);
        let ba = desk_baseline_answer(i);

        // Loop run: one clean pass per example.
        let kp = prompts::render(names::KNOWLEDGE_GEN, &[("question", q.as_str())])
            .expect("template renders");
        b.complete(&kp, &k);
        let fp = prompts::render_factuality_prompt(&q, demos).expect("template renders");
        b.score_tokens(&fp, &k, &vec![-0.5; k.split_whitespace().count()]);
        let ap = prompts::render(names::ANSWER_GEN, &[
            ("knowledge", k.as_str()),
            ("question", q.as_str()),
        ])
        .expect("template renders");
        b.complete(&ap, &a);
        b.score_tokens(&format!("{k}\n"), &a, &vec![-1.0; a.split_whitespace().count()]);
        b.embed(&q, &[1.0, 0.0]);
        b.embed(&a, &[1.0, 0.0]);

        // Baseline run: the raw question is the whole prompt.
        b.complete(&q, &ba);

        // Evaluation of both answers against the context grounding. Answers
        // are single sentences, so sample- and sentence-level entailment
        // share one request.
        b.nli(&ctx, &a, NliLabel::Entail);
        b.score_tokens(&format!("{ctx}\n"), &a, &vec![-2.0; a.split_whitespace().count()]);
        let label = if i % 2 == 0 { NliLabel::Neutral } else { NliLabel::Contradict };
        b.nli(&ctx, &ba, label);
        b.score_tokens(&format!("{ctx}\n"), &ba, &vec![-3.0; ba.split_whitespace().count()]);
    }
    b.into_script()
}

/// The bundled run manifest for the desk corpus, with paths relative to the
/// fixture directory.
pub fn desk_run_manifest(mode: RunMode) -> RunManifest {
    let run_id = match mode {
        RunMode::Loop => "desk-loop",
        RunMode::Baseline => "desk-baseline",
    };
    RunManifest {
        run_id: run_id.to_string(),
        mode,
        parallelism: 2,
        seed: 0,
        dataset: crate::data::DatasetManifest {
            name: "desk".to_string(),
            format: crate::data::DatasetFormat::GenericJsonl,
            path: PathBuf::from("corpus.jsonl"),
            field_map: Default::default(),
            limit: None,
        },
        config: LoopConfig::default(),
        backend: BackendBindings {
            retries: 3,
            max_new_tokens: 512,
            default: Some(BindingSpec {
                kind: BindingKind::Mock,
                script: Some(PathBuf::from("script.json")),
                endpoint: None,
            }),
            complete: None,
            score_tokens: None,
            embed: None,
            nli: None,
        },
    }
}

/// Writes the four desk fixture files (corpus, script, and both run
/// manifests) into `dir`. Output bytes are fully deterministic.
pub fn write_desk_fixtures(dir: &Path, count: usize) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    data::write_generic_jsonl(&dir.join("corpus.jsonl"), &desk_corpus(count))
        .map_err(std::io::Error::other)?;
    std::fs::write(dir.join("script.json"), build_desk_script(count).to_json())?;
    for (name, mode) in [("run_loop.toml", RunMode::Loop), ("run_baseline.toml", RunMode::Baseline)]
    {
        let manifest = desk_run_manifest(mode);
        let text = toml::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(dir.join(name), text)?;
    }
    Ok(())
}

/// Where the bundled fixtures live in the repository.
pub fn repo_fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join("fixtures/desk")
}

/// One example's intended gate-score sequence for a single main pass. With a
/// scripted backend every main pass replays identically, so one pass fully
/// determines the run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub id: String,
    pub question: String,
    /// Factuality gate scores for successive knowledge candidates. Must hold
    /// at least `max_knowledge_loop` entries; entries after the first passing
    /// score are unused.
    pub knowledge_scores: Vec<f64>,
    /// Consistency gate scores for successive answer candidates, same rules
    /// with `max_answer_loop`.
    pub consistency_scores: Vec<f64>,
    /// The question-answer cosine for the pass's final answer.
    pub entailment_cosine: f64,
}

fn trajectory_knowledge(spec: &TrajectorySpec, r: usize) -> String {
    format!("knowledge-r{r}-{}", spec.id)
}

fn trajectory_answer(spec: &TrajectorySpec, r: usize) -> String {
    format!("answer-r{r}-{}.", spec.id)
}

/// A minimal runnable example for a trajectory spec.
pub fn example_for_spec(spec: &TrajectorySpec) -> QAExample {
    QAExample {
        id: spec.id.clone(),
        question: spec.question.clone(),
        context: None,
        reference_answers: Vec::new(),
        short_label: None,
    }
}

fn mirror_knowledge_instruction(cfg: &LoopConfig, score: f64) -> String {
    match cfg.ablation {
        Ablation::Full => prompts::render(names::KNOWLEDGE_REFINE, &[
            ("score", prompts::format_score(score).as_str()),
            ("threshold", prompts::format_threshold(cfg.threshold_factual).as_str()),
        ]),
        Ablation::NoAspect => prompts::render(names::KNOWLEDGE_REFINE_NO_ASPECT, &[]),
        Ablation::NoScoreNumber => prompts::render(names::KNOWLEDGE_REFINE_NO_NUM, &[]),
        Ablation::NoRefinement => unreachable!("refinement is disabled in this ablation"),
    }
    .expect("template renders")
}

fn mirror_answer_instruction(cfg: &LoopConfig, score: f64) -> String {
    match cfg.ablation {
        Ablation::Full => prompts::render(names::ANSWER_REFINE, &[
            ("score", prompts::format_score(score).as_str()),
            ("threshold", prompts::format_threshold(cfg.threshold_consistency).as_str()),
        ]),
        Ablation::NoAspect => prompts::render(names::ANSWER_REFINE_NO_ASPECT, &[]),
        Ablation::NoScoreNumber => prompts::render(names::ANSWER_REFINE_NO_NUM, &[]),
        Ablation::NoRefinement => unreachable!("refinement is disabled in this ablation"),
    }
    .expect("template renders")
}

/// Scripts every backend request the controller will make when running
/// `spec` under `cfg`, by mirroring the loop exit rules: a gate score at or
/// above its threshold stops the inner loop, the candidate budget caps
/// refinement, and an exhausted budget carries the best-scoring candidate
/// forward. Texts are single tokens (and single sentences), so scripted gate
/// scores are reproduced exactly.
pub fn script_trajectory(spec: &TrajectorySpec, cfg: &LoopConfig) -> MockScript {
    let q = spec.question.as_str();
    let demos = &prompts::default_demonstrations()
        [..(cfg.demo_count as usize).min(prompts::default_demonstrations().len())];
    let skip_inner_gates = cfg.ablation == Ablation::NoRefinement;
    let mut b = ScriptBuilder::new();

    let kp0 = prompts::render(names::KNOWLEDGE_GEN, &[("question", q)]).expect("template renders");
    b.complete(&kp0, &trajectory_knowledge(spec, 0));

    let final_knowledge = if skip_inner_gates {
        trajectory_knowledge(spec, 0)
    } else {
        let fp = prompts::render_factuality_prompt(q, demos).expect("template renders");
        let mut k_prompt = kp0;
        let mut best: Option<(f64, usize)> = None;
        let mut passed_at: Option<usize> = None;
        let mut r = 0usize;
        loop {
            let score = *spec
                .knowledge_scores
                .get(r)
                .unwrap_or_else(|| panic!("spec {} needs a knowledge score for candidate {r}", spec.id));
            b.score_tokens(&fp, &trajectory_knowledge(spec, r), &[score]);
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, r));
            }
            if score >= cfg.threshold_factual {
                passed_at = Some(r);
                break;
            }
            if (r as u32 + 1) >= cfg.max_knowledge_loop {
                break;
            }
            let instruction = mirror_knowledge_instruction(cfg, score);
            let next =
                refine_prompt(&k_prompt, &trajectory_knowledge(spec, r), &instruction, "Knowledge:");
            b.complete(&next, &trajectory_knowledge(spec, r + 1));
            k_prompt = next;
            r += 1;
        }
        let chosen = passed_at.unwrap_or_else(|| best.expect("scored at least once").1);
        trajectory_knowledge(spec, chosen)
    };

    let ap0 = prompts::render(names::ANSWER_GEN, &[
        ("knowledge", final_knowledge.as_str()),
        ("question", q),
    ])
    .expect("template renders");
    b.complete(&ap0, &trajectory_answer(spec, 0));

    let final_answer = if skip_inner_gates {
        trajectory_answer(spec, 0)
    } else {
        let mut a_prompt = ap0;
        let mut best: Option<(f64, usize)> = None;
        let mut passed_at: Option<usize> = None;
        let mut r = 0usize;
        loop {
            let score = *spec
                .consistency_scores
                .get(r)
                .unwrap_or_else(|| panic!("spec {} needs a consistency score for candidate {r}", spec.id));
            b.score_tokens(&format!("{final_knowledge}\n"), &trajectory_answer(spec, r), &[score]);
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, r));
            }
            if score >= cfg.threshold_consistency {
                passed_at = Some(r);
                break;
            }
            if (r as u32 + 1) >= cfg.max_answer_loop {
                break;
            }
            let instruction = mirror_answer_instruction(cfg, score);
            let next =
                refine_prompt(&a_prompt, &trajectory_answer(spec, r), &instruction, "Answer:");
            b.complete(&next, &trajectory_answer(spec, r + 1));
            a_prompt = next;
            r += 1;
        }
        let chosen = passed_at.unwrap_or_else(|| best.expect("scored at least once").1);
        trajectory_answer(spec, chosen)
    };

    b.embed(q, &[1.0, 0.0, 0.0]);
    let c = spec.entailment_cosine;
    b.embed(&final_answer, &[c, (1.0 - c * c).max(0.0).sqrt(), 0.0]);
    b.into_script()
}
