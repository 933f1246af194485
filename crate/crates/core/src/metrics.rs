//! Corpus evaluation: lexical overlap, entailment labels, and consistency.
//!
//! Tokenization and sentence-splitting rules are fixed and documented in
//! docs/tokenization.md; they are part of the metric definitions, so changing
//! them changes reported numbers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::config::LoopConfig;
use crate::scorers::{self, ScoreError};
use crate::types::QAExample;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("references are empty")]
    NoReferences,
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("example {id} has no grounding text (no context or reference answer)")]
    NoGrounding { id: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Lowercases, strips punctuation (keeping intra-word hyphens), and splits on
/// whitespace. The exact rule table ships in docs/tokenization.md.
pub fn tokenize_for_overlap(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut cleaned = String::with_capacity(lower.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() || c.is_whitespace() {
            cleaned.push(c);
        } else if c == '-'
            && i > 0
            && chars[i - 1].is_alphanumeric()
            && i + 1 < chars.len()
            && chars[i + 1].is_alphanumeric()
        {
            // Intra-word hyphen: "anti-viral" stays one token.
            cleaned.push(c);
        }
        // Any other character is punctuation and is dropped.
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn pair_f1(cand: &[String], refr: &[String]) -> f64 {
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in refr {
        *ref_counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in cand {
        if let Some(n) = ref_counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    let p = overlap as f64 / cand.len() as f64;
    let r = overlap as f64 / refr.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Unigram F1 with multiset overlap, maximized over the references.
pub fn unigram_f1(candidate: &str, references: &[String]) -> Result<f64, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::NoReferences);
    }
    let cand = tokenize_for_overlap(candidate);
    let mut best = 0.0f64;
    for reference in references {
        best = best.max(pair_f1(&cand, &tokenize_for_overlap(reference)));
    }
    Ok(best)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // One-row DP over b.
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn pair_rouge_l(cand: &[String], refr: &[String]) -> f64 {
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(cand, refr) as f64;
    let p = lcs / cand.len() as f64;
    let r = lcs / refr.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-L F-measure (equal precision/recall weighting), maximized over the
/// references.
pub fn rouge_l(candidate: &str, references: &[String]) -> Result<f64, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::NoReferences);
    }
    let cand = tokenize_for_overlap(candidate);
    let mut best = 0.0f64;
    for reference in references {
        best = best.max(pair_rouge_l(&cand, &tokenize_for_overlap(reference)));
    }
    Ok(best)
}

/// Words that end in a period without ending a sentence. Compared
/// case-insensitively against the whole whitespace-delimited token.
const ABBREVIATIONS: &[&str] = &[
    "al.", "approx.", "cf.", "dr.", "e.g.", "etc.", "fig.", "i.e.", "mr.", "mrs.", "ms.", "no.",
    "prof.", "st.", "vs.",
];

/// Byte ranges of the sentence segments, partitioning the input exactly.
/// Concatenating the raw slices reconstructs the input byte for byte.
pub(crate) fn split_sentence_spans(text: &str) -> Vec<std::ops::Range<usize>> {
    if text.is_empty() {
        return Vec::new();
    }
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let mut points = Vec::new();
    let mut i = 0;
    while i < n {
        let c = chars[i].1;
        if c == '.' || c == '!' || c == '?' {
            // Swallow a run of terminal punctuation ("?!", "...").
            let mut j = i;
            while j + 1 < n && matches!(chars[j + 1].1, '.' | '!' | '?') {
                j += 1;
            }
            let end = chars[j].0 + chars[j].1.len_utf8();
            let is_abbrev = chars[j].1 == '.' && {
                let mut w = i;
                while w > 0 && !chars[w - 1].1.is_whitespace() {
                    w -= 1;
                }
                let word = text[chars[w].0..end].to_lowercase();
                ABBREVIATIONS.contains(&word.as_str())
            };
            let mut k = j + 1;
            let splits = if k >= n {
                true
            } else if chars[k].1.is_whitespace() {
                while k < n && chars[k].1.is_whitespace() {
                    k += 1;
                }
                k >= n || chars[k].1.is_uppercase()
            } else {
                false
            };
            if splits && !is_abbrev {
                points.push(end);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    let mut spans = Vec::new();
    let mut start = 0;
    for p in points {
        spans.push(start..p);
        start = p;
    }
    if start < text.len() {
        spans.push(start..text.len());
    }
    spans
}

/// Splits text into sentences at terminal punctuation followed by whitespace
/// and an uppercase letter (or end of text), with an abbreviation guard.
/// Segments are trimmed; empty segments are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    split_sentence_spans(text)
        .into_iter()
        .map(|span| text[span].trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Where an example's grounding text came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingSource {
    Context,
    ReferenceAnswer,
}

/// The premise used to judge an answer: the example's context when present,
/// else its first reference answer.
pub fn grounding_text(example: &QAExample) -> Result<(&str, GroundingSource), MetricsError> {
    if let Some(context) = &example.context {
        if !context.trim().is_empty() {
            return Ok((context, GroundingSource::Context));
        }
    }
    if let Some(first) = example.reference_answers.first() {
        if !first.trim().is_empty() {
            return Ok((first, GroundingSource::ReferenceAnswer));
        }
    }
    Err(MetricsError::NoGrounding {
        id: example.id.clone(),
    })
}

/// Sample-level NLI: classifies the whole answer against the grounding text.
/// Entail scores 1, neutral 0, contradict -1.
pub fn nli_sample(
    backend: &dyn Backend,
    example: &QAExample,
    answer: &str,
) -> Result<i32, MetricsError> {
    if answer.trim().is_empty() {
        return Err(MetricsError::EmptyAnswer);
    }
    let (premise, _) = grounding_text(example)?;
    Ok(backend.nli_classify(premise, answer)?.value())
}

/// Sentence-level NLI: the mean of per-sentence label values over the
/// answer's sentences. A one-sentence answer equals its sample value.
pub fn nli_sentence(
    backend: &dyn Backend,
    example: &QAExample,
    answer: &str,
) -> Result<f64, MetricsError> {
    let sentences = split_sentences(answer);
    if sentences.is_empty() {
        return Err(MetricsError::EmptyAnswer);
    }
    let (premise, _) = grounding_text(example)?;
    let mut sum = 0.0;
    for sentence in &sentences {
        sum += backend.nli_classify(premise, sentence)?.value() as f64;
    }
    Ok(sum / sentences.len() as f64)
}

/// Per-example metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub id: String,
    pub f1: f64,
    pub rouge_l: f64,
    pub nli_sample: i32,
    pub nli_sentence: f64,
    pub consistency: f64,
    pub grounding: GroundingSource,
}

/// Corpus means over the successfully evaluated rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub f1: f64,
    pub rouge_l: f64,
    pub nli_sample: f64,
    pub nli_sentence: f64,
    pub consistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricFailure {
    pub id: String,
    pub error: String,
}

/// Everything `evaluate_corpus` produces: per-example rows, per-example
/// failures (never silently dropped), and corpus means when any row exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ExampleMetrics>,
    pub failures: Vec<MetricFailure>,
    pub means: Option<MetricMeans>,
    pub example_count: usize,
}

/// Means are summed in id order so they do not depend on input order.
fn compute_means(rows: &[ExampleMetrics]) -> Option<MetricMeans> {
    if rows.is_empty() {
        return None;
    }
    let mut ordered: Vec<&ExampleMetrics> = rows.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let n = ordered.len() as f64;
    let mut f1 = 0.0;
    let mut rouge = 0.0;
    let mut spl = 0.0;
    let mut sent = 0.0;
    let mut cons = 0.0;
    for row in ordered {
        f1 += row.f1;
        rouge += row.rouge_l;
        spl += row.nli_sample as f64;
        sent += row.nli_sentence;
        cons += row.consistency;
    }
    Some(MetricMeans {
        f1: f1 / n,
        rouge_l: rouge / n,
        nli_sample: spl / n,
        nli_sentence: sent / n,
        consistency: cons / n,
    })
}

/// Evaluates answers over a corpus: per-example unigram F1, ROUGE-L,
/// sample- and sentence-level NLI, and consistency of the answer against the
/// example's grounding text (via the consistency scorer). Per-example
/// failures are collected, not fatal.
pub fn evaluate_corpus(
    items: &[(QAExample, String)],
    backend: &dyn Backend,
    cfg: &LoopConfig,
) -> Result<MetricReport, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (example, answer) in items {
        match evaluate_example(example, answer, backend, cfg) {
            Ok(row) => rows.push(row),
            Err(err) => failures.push(MetricFailure {
                id: example.id.clone(),
                error: err.to_string(),
            }),
        }
    }
    let means = compute_means(&rows);
    Ok(MetricReport {
        rows,
        failures,
        means,
        example_count: items.len(),
    })
}

fn evaluate_example(
    example: &QAExample,
    answer: &str,
    backend: &dyn Backend,
    cfg: &LoopConfig,
) -> Result<ExampleMetrics, MetricsError> {
    if answer.trim().is_empty() {
        return Err(MetricsError::EmptyAnswer);
    }
    let f1 = unigram_f1(answer, &example.reference_answers)?;
    let rouge = rouge_l(answer, &example.reference_answers)?;
    let (premise, grounding) = grounding_text(example)?;
    let nli_spl = backend.nli_classify(premise, answer)?.value();
    let sentences = split_sentences(answer);
    if sentences.is_empty() {
        return Err(MetricsError::EmptyAnswer);
    }
    let mut sent_sum = 0.0;
    for sentence in &sentences {
        sent_sum += backend.nli_classify(premise, sentence)?.value() as f64;
    }
    let nli_sent = sent_sum / sentences.len() as f64;
    let consistency = scorers::consistency_score(backend, cfg, answer, premise)?.score;
    Ok(ExampleMetrics {
        id: example.id.clone(),
        f1,
        rouge_l: rouge,
        nli_sample: nli_spl,
        nli_sentence: nli_sent,
        consistency,
        grounding,
    })
}

/// Renders one table row per (label, report), in the evaluation protocol's
/// column order. F1 and ROUGE-L are reported x100.
pub fn comparison_table(entries: &[(String, &MetricReport)]) -> String {
    let mut label_width = "run".len();
    for (label, _) in entries {
        label_width = label_width.max(label.len());
    }
    let mut out = format!(
        "{:<label_width$}  {:>8}  {:>8}  {:>11}  {:>6}  {:>6}\n",
        "run", "NLI-Spl", "NLI-Sent", "Consistency", "F1", "R-L"
    );
    for (label, report) in entries {
        match &report.means {
            Some(m) => {
                out.push_str(&format!(
                    "{label:<label_width$}  {:>8.4}  {:>8.4}  {:>11.2}  {:>6.2}  {:>6.2}\n",
                    m.nli_sample,
                    m.nli_sentence,
                    m.consistency,
                    m.f1 * 100.0,
                    m.rouge_l * 100.0
                ));
            }
            None => {
                out.push_str(&format!(
                    "{label:<label_width$}  {:>8}  {:>8}  {:>11}  {:>6}  {:>6}\n",
                    "-", "-", "-", "-", "-"
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn tokenize_strips_punctuation_and_lowercases() {
        assert_eq!(tokenize_for_overlap("The cat, sat."), vec!["the", "cat", "sat"]);
        assert_eq!(tokenize_for_overlap("A-B c"), vec!["a-b", "c"]);
        assert_eq!(tokenize_for_overlap(""), Vec::<String>::new());
        assert_eq!(tokenize_for_overlap("  ...  "), Vec::<String>::new());
        // Leading/trailing hyphens are punctuation, only intra-word survives.
        assert_eq!(tokenize_for_overlap("-a b- a-b"), vec!["a", "b", "a-b"]);
    }

    #[test]
    fn f1_matches_hand_computed_values() {
        // overlap {b, c}: p = 2/3, r = 2/3, f1 = 2/3.
        let got = unigram_f1("a b c", &["b c d".to_string()]).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12);

        // Identical strings score exactly 1.
        assert_eq!(unigram_f1("a b", &["a b".to_string()]).unwrap(), 1.0);

        // Disjoint strings score exactly 0.
        assert_eq!(unigram_f1("a", &["b".to_string()]).unwrap(), 0.0);
    }

    #[test]
    fn f1_overlap_is_multiset_not_set() {
        // cand [a a b], ref [a b b]: overlap = min(2,1) + min(1,2) = 2.
        let got = unigram_f1("a a b", &["a b b".to_string()]).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_takes_the_best_reference() {
        let refs = vec!["z z z".to_string(), "a b".to_string()];
        assert_eq!(unigram_f1("a b", &refs).unwrap(), 1.0);
    }

    #[test]
    fn f1_requires_references() {
        assert!(matches!(unigram_f1("a", &[]), Err(MetricsError::NoReferences)));
    }

    #[test]
    fn empty_candidate_scores_zero() {
        assert_eq!(unigram_f1("", &["a".to_string()]).unwrap(), 0.0);
        assert_eq!(rouge_l("", &["a".to_string()]).unwrap(), 0.0);
    }

    #[test]
    fn rouge_matches_hand_computed_values() {
        // LCS(the cat sat, the cat ran) = [the cat], p = r = 2/3, f = 2/3.
        let got = rouge_l("the cat sat", &["the cat ran".to_string()]).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12);

        // LCS(a c, a b c) = 2: p = 1, r = 2/3, f = 0.8.
        let got = rouge_l("a c", &["a b c".to_string()]).unwrap();
        assert!((got - 0.8).abs() < 1e-12);

        // Order matters for LCS: [a b] vs [b a] share only one token in order.
        let got = rouge_l("a b", &["b a".to_string()]).unwrap();
        assert!((got - 0.5).abs() < 1e-12);
    }

    /// Exhaustive LCS by subsequence enumeration; independent of the DP.
    fn lcs_brute(a: &[String], b: &[String]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<&String> =
                a.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, t)| t).collect();
            let mut it = b.iter();
            if sub.iter().all(|t| it.any(|x| x == *t)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    #[test]
    fn lcs_dp_agrees_with_brute_force_on_small_inputs() {
        let tokens = ["a", "b", "c"];
        // All pairs of sequences up to length 4 over a 3-symbol alphabet.
        let mut seqs: Vec<Vec<String>> = vec![vec![]];
        for len in 1..=4usize {
            let mut idx = vec![0usize; len];
            loop {
                seqs.push(idx.iter().map(|&i| tokens[i].to_string()).collect());
                let mut k = 0;
                while k < len {
                    idx[k] += 1;
                    if idx[k] < tokens.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == len {
                    break;
                }
            }
        }
        for a in &seqs {
            for b in &seqs {
                assert_eq!(lcs_len(a, b), lcs_brute(a, b), "a={a:?} b={b:?}");
            }
        }
    }

    #[test]
    fn sentences_split_on_terminal_punctuation_before_uppercase() {
        assert_eq!(
            split_sentences("Sentence one. Sentence two."),
            vec!["Sentence one.", "Sentence two."]
        );
        assert_eq!(split_sentences("A. B!"), vec!["A.", "B!"]);
        assert_eq!(split_sentences("no trailing punctuation"), vec!["no trailing punctuation"]);
    }

    #[test]
    fn abbreviations_do_not_split() {
        assert_eq!(
            split_sentences("See Dr. Smith. Then rest."),
            vec!["See Dr. Smith.", "Then rest."]
        );
        assert_eq!(
            split_sentences("Use e.g. Aspirin today. Fine."),
            vec!["Use e.g. Aspirin today.", "Fine."]
        );
    }

    #[test]
    fn lowercase_continuations_and_decimals_do_not_split() {
        assert_eq!(split_sentences("It was 3.5 mg. next dose"), vec![
            "It was 3.5 mg. next dose"
        ]);
        assert_eq!(split_sentences("Stop?! Go."), vec!["Stop?!", "Go."]);
    }

    #[test]
    fn empty_and_blank_inputs_have_no_sentences() {
        assert_eq!(split_sentences(""), Vec::<String>::new());
        assert_eq!(split_sentences("   "), Vec::<String>::new());
    }

    proptest! {
        #[test]
        fn sentence_spans_partition_the_input(parts in prop::collection::vec(
            prop_oneof![
                Just("Alpha"), Just("beta"), Just("Dr."), Just("e.g."), Just("3.5"),
                Just("."), Just("!"), Just("?"), Just(" "), Just("  "), Just("B"),
            ],
            0..30,
        )) {
            let text: String = parts.concat();
            let spans = split_sentence_spans(&text);
            // Spans are contiguous and cover the whole input.
            let mut cursor = 0;
            for span in &spans {
                prop_assert_eq!(span.start, cursor);
                cursor = span.end;
            }
            prop_assert_eq!(cursor, text.len());
            // Concatenating raw segments reconstructs the input.
            let rebuilt: String = spans.iter().map(|s| &text[s.clone()]).collect();
            prop_assert_eq!(rebuilt, text);
        }

        #[test]
        fn f1_and_rouge_are_bounded_and_symmetric_at_one(words in prop::collection::vec(
            prop_oneof![Just("a"), Just("b"), Just("c"), Just("d")], 1..12)) {
            let text = words.join(" ");
            let refs = vec![text.clone()];
            let f1 = unigram_f1(&text, &refs).unwrap();
            let rl = rouge_l(&text, &refs).unwrap();
            prop_assert!((f1 - 1.0).abs() < 1e-12);
            prop_assert!((rl - 1.0).abs() < 1e-12);
        }
    }

    mod aggregation {
        use super::*;
        use crate::backend::mock::{ScriptBuilder, ScriptedBackend};
        use crate::backend::NliLabel;

        fn example(id: &str, context: &str, reference: &str) -> QAExample {
            QAExample {
                id: id.to_string(),
                question: "Q?".to_string(),
                context: Some(context.to_string()),
                reference_answers: vec![reference.to_string()],
                short_label: None,
            }
        }

        #[test]
        fn sample_level_uses_context_as_premise() {
            let ex = example("e1", "ctx text", "ref answer");
            let mut b = ScriptBuilder::new();
            b.nli("ctx text", "An answer.", NliLabel::Contradict);
            let backend = ScriptedBackend::new(b.into_script());
            assert_eq!(nli_sample(&backend, &ex, "An answer.").unwrap(), -1);
            let (premise, source) = grounding_text(&ex).unwrap();
            assert_eq!(premise, "ctx text");
            assert_eq!(source, GroundingSource::Context);
        }

        #[test]
        fn sample_level_falls_back_to_reference() {
            let mut ex = example("e1", "ctx", "ref answer");
            ex.context = None;
            let (premise, source) = grounding_text(&ex).unwrap();
            assert_eq!(premise, "ref answer");
            assert_eq!(source, GroundingSource::ReferenceAnswer);

            ex.reference_answers.clear();
            assert!(matches!(
                grounding_text(&ex),
                Err(MetricsError::NoGrounding { .. })
            ));
        }

        #[test]
        fn sentence_level_averages_label_values() {
            let ex = example("e1", "ctx", "ref");
            // Two sentences labeled entail and neutral: mean = 0.5.
            let answer = "First fact. Second fact.";
            let mut b = ScriptBuilder::new();
            b.nli("ctx", "First fact.", NliLabel::Entail);
            // "Second fact." is left unscripted: neutral by default.
            let backend = ScriptedBackend::new(b.into_script());
            let got = nli_sentence(&backend, &ex, answer).unwrap();
            assert!((got - 0.5).abs() < 1e-12);
        }

        #[test]
        fn one_sentence_answer_equals_its_sample_value() {
            let ex = example("e1", "ctx", "ref");
            let mut b = ScriptBuilder::new();
            b.nli("ctx", "Only sentence.", NliLabel::Entail);
            let backend = ScriptedBackend::new(b.into_script());
            let spl = nli_sample(&backend, &ex, "Only sentence.").unwrap();
            let sent = nli_sentence(&backend, &ex, "Only sentence.").unwrap();
            assert_eq!(spl as f64, sent);
        }
    }
}
