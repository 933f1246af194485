//! Prompt template registry.
//!
//! Templates live in `prompts/*.txt` resource files (compiled in verbatim) so
//! that the wording the pipeline sends to a model is reviewable and diffable
//! as plain text, never spread across format strings. `prompts/manifest.toml`
//! lists template name -> file; the registry verifies the two stay in sync.
//!
//! Placeholders use `{name}` syntax. Substitution is a single pass over the
//! template, so braces inside bound values are taken literally. A single
//! trailing newline in a resource file is not part of the template text.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use serde::Deserialize;
use thiserror::Error;

use crate::types::Demonstration;

/// Template name constants, so callers cannot typo a registry lookup.
pub mod names {
    pub const KNOWLEDGE_GEN: &str = "knowledge_gen";
    pub const KNOWLEDGE_REFINE: &str = "knowledge_refine";
    pub const KNOWLEDGE_REFINE_NO_ASPECT: &str = "knowledge_refine_no_aspect";
    pub const KNOWLEDGE_REFINE_NO_NUM: &str = "knowledge_refine_no_num";
    pub const ANSWER_GEN: &str = "answer_gen";
    pub const ANSWER_REFINE: &str = "answer_refine";
    pub const ANSWER_REFINE_NO_ASPECT: &str = "answer_refine_no_aspect";
    pub const ANSWER_REFINE_NO_NUM: &str = "answer_refine_no_num";
    pub const FACTUALITY_SCORING: &str = "factuality_scoring";
}

/// Every template the registry must provide, with its compiled-in text.
const BUILTIN_SOURCES: &[(&str, &str)] = &[
    (names::ANSWER_GEN, include_str!("../prompts/answer_gen.txt")),
    (names::ANSWER_REFINE, include_str!("../prompts/answer_refine.txt")),
    (
        names::ANSWER_REFINE_NO_ASPECT,
        include_str!("../prompts/answer_refine_no_aspect.txt"),
    ),
    (
        names::ANSWER_REFINE_NO_NUM,
        include_str!("../prompts/answer_refine_no_num.txt"),
    ),
    (
        names::FACTUALITY_SCORING,
        include_str!("../prompts/factuality_scoring.txt"),
    ),
    (names::KNOWLEDGE_GEN, include_str!("../prompts/knowledge_gen.txt")),
    (
        names::KNOWLEDGE_REFINE,
        include_str!("../prompts/knowledge_refine.txt"),
    ),
    (
        names::KNOWLEDGE_REFINE_NO_ASPECT,
        include_str!("../prompts/knowledge_refine_no_aspect.txt"),
    ),
    (
        names::KNOWLEDGE_REFINE_NO_NUM,
        include_str!("../prompts/knowledge_refine_no_num.txt"),
    ),
];

const MANIFEST_SOURCE: &str = include_str!("../prompts/manifest.toml");
const DEMONSTRATIONS_SOURCE: &str = include_str!("../prompts/demonstrations.json");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template:?} has no binding for placeholder {placeholder:?}")]
    MissingBinding { template: String, placeholder: String },
    #[error("factuality scoring requires at least one demonstration")]
    EmptyDemonstrations,
}

/// A named template with `{placeholder}` slots.
#[derive(Debug, Clone)]
pub struct Template {
    name: String,
    text: String,
}

impl Template {
    /// The raw template text, placeholders intact.
    pub fn text(&self) -> &str {
        &self.text
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            let Some(close_rel) = rest[open + 1..].find('}') else {
                break;
            };
            let name = &rest[open + 1..open + 1 + close_rel];
            if !name.is_empty() && !out.iter().any(|n| n == name) {
                out.push(name.to_string());
            }
            rest = &rest[open + 1 + close_rel + 1..];
        }
        out
    }

    fn render(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            let Some(close_rel) = rest[open + 1..].find('}') else {
                out.push_str(rest);
                return Ok(out);
            };
            let name = &rest[open + 1..open + 1 + close_rel];
            out.push_str(&rest[..open]);
            match bindings.iter().find(|(k, _)| *k == name) {
                Some((_, value)) => out.push_str(value),
                None => {
                    return Err(PromptError::MissingBinding {
                        template: self.name.clone(),
                        placeholder: name.to_string(),
                    })
                }
            }
            rest = &rest[open + 1 + close_rel + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// The set of templates the pipeline renders from.
#[derive(Debug)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, Template>,
}

impl TemplateRegistry {
    /// Renders `name` with the given placeholder bindings. Every placeholder
    /// in the template must be bound; extra bindings are ignored.
    pub fn render(&self, name: &str, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let template = self
            .templates
            .get(name)
            .ok_or_else(|| PromptError::UnknownTemplate(name.to_string()))?;
        template.render(bindings)
    }

    pub fn get(&self, name: &str) -> Option<&Template> {
        self.templates.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

#[derive(Deserialize)]
struct RegistryManifest {
    templates: BTreeMap<String, String>,
}

fn build_registry() -> TemplateRegistry {
    let manifest: RegistryManifest =
        toml::from_str(MANIFEST_SOURCE).expect("prompt manifest parses");
    let mut templates = BTreeMap::new();
    for (name, raw) in BUILTIN_SOURCES {
        // A single trailing newline comes from the file, not the template.
        let text = raw.strip_suffix('\n').unwrap_or(raw).to_string();
        templates.insert(
            name.to_string(),
            Template {
                name: name.to_string(),
                text,
            },
        );
    }
    // The manifest and the compiled-in set must agree exactly.
    let manifest_names: Vec<&String> = manifest.templates.keys().collect();
    let builtin_names: Vec<&String> = templates.keys().collect();
    assert_eq!(
        manifest_names, builtin_names,
        "prompt manifest out of sync with compiled templates"
    );
    TemplateRegistry { templates }
}

static REGISTRY: LazyLock<TemplateRegistry> = LazyLock::new(build_registry);
static DEMONSTRATIONS: LazyLock<Vec<Demonstration>> = LazyLock::new(|| {
    serde_json::from_str(DEMONSTRATIONS_SOURCE).expect("bundled demonstrations parse")
});

/// The built-in registry backed by the bundled resource files.
pub fn registry() -> &'static TemplateRegistry {
    &REGISTRY
}

/// Convenience wrapper over [`registry()`].render.
pub fn render(name: &str, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
    registry().render(name, bindings)
}

/// The bundled demonstration set for the factuality scorer, in fixed order.
pub fn default_demonstrations() -> &'static [Demonstration] {
    &DEMONSTRATIONS
}

/// Builds the factuality scoring prompt: the instruction block, each
/// demonstration as "Question: ...\nKnowledge: ...\n" in order, then the
/// target question with a trailing "Knowledge:" awaiting the continuation.
pub fn render_factuality_prompt(
    question: &str,
    demos: &[Demonstration],
) -> Result<String, PromptError> {
    if demos.is_empty() {
        return Err(PromptError::EmptyDemonstrations);
    }
    let mut block = String::new();
    for demo in demos {
        block.push_str("Question: ");
        block.push_str(&demo.question);
        block.push_str("\nKnowledge: ");
        block.push_str(&demo.knowledge);
        block.push('\n');
    }
    render(
        names::FACTUALITY_SCORING,
        &[("demonstrations", block.as_str()), ("question", question)],
    )
}

/// Renders a gate score for inclusion in a refine prompt: two decimal places.
pub fn format_score(x: f64) -> String {
    format!("{x:.2}")
}

/// Renders a threshold for inclusion in a refine prompt. Keeps the value's
/// natural precision but never drops the decimal point ("-1" becomes "-1.0").
pub fn format_threshold(x: f64) -> String {
    let s = format!("{x}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}
