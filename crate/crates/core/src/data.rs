//! Dataset loading: a generic JSON Lines format with field renaming, plus an
//! adapter for the PubMedQA-style single-object JSON layout.
//!
//! Malformed records are skipped with reasons, never silently dropped and
//! never fatal unless nothing loads at all.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{QAExample, ShortLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// One JSON object per line with id/question/context/reference_answers/
    /// short_label fields, renameable through `field_map`.
    GenericJsonl,
    /// A single JSON object keyed by example id, with QUESTION, CONTEXTS,
    /// LONG_ANSWER, and final_decision fields per record.
    PubmedqaJson,
}

/// Where and how to read a dataset. `field_map` renames source fields to the
/// generic schema (source name to target name); targets not mentioned keep
/// their own names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub format: DatasetFormat,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub field_map: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read dataset {path}: {source}")]
    UnreadableSource {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("dataset {path} is not valid JSON: {source}")]
    BadSourceJson {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("dataset {path} contains no records")]
    EmptySource { path: PathBuf },
    #[error("dataset {path} has no usable records ({skipped} skipped)")]
    AllRecordsMalformed { path: PathBuf, skipped: usize },
    #[error("field_map target {target:?} is not a dataset field")]
    UnknownTargetField { target: String },
    #[error("field_map maps two source fields to target {target:?}")]
    DuplicateTargetField { target: String },
    #[error("field_map is not supported for the {format:?} format")]
    FieldMapNotSupported { format: DatasetFormat },
}

/// A record the loader rejected and why. `line` is 1-based for line-oriented
/// sources and absent for keyed sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub line: Option<usize>,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOutcome {
    pub examples: Vec<QAExample>,
    pub skipped: Vec<SkippedRecord>,
}

const TARGET_FIELDS: [&str; 5] =
    ["id", "question", "context", "reference_answers", "short_label"];

/// Resolves the user's source-to-target map into a target-to-source lookup
/// with identity defaults.
fn resolve_field_map(
    field_map: &BTreeMap<String, String>,
) -> Result<BTreeMap<&'static str, String>, DataError> {
    let mut lookup: BTreeMap<&'static str, String> = TARGET_FIELDS
        .iter()
        .map(|&t| (t, t.to_string()))
        .collect();
    let mut claimed = BTreeSet::new();
    for (source, target) in field_map {
        let Some(&canonical) = TARGET_FIELDS.iter().find(|&&t| t == target.as_str()) else {
            return Err(DataError::UnknownTargetField {
                target: target.clone(),
            });
        };
        if !claimed.insert(canonical) {
            return Err(DataError::DuplicateTargetField {
                target: target.clone(),
            });
        }
        lookup.insert(canonical, source.clone());
    }
    Ok(lookup)
}

/// Loads a dataset per its manifest. `manifest.path` is used as given; the
/// caller resolves relative paths first.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<LoadOutcome, DataError> {
    match manifest.format {
        DatasetFormat::GenericJsonl => load_generic_jsonl(manifest),
        DatasetFormat::PubmedqaJson => {
            if !manifest.field_map.is_empty() {
                return Err(DataError::FieldMapNotSupported {
                    format: manifest.format,
                });
            }
            load_pubmedqa_json(manifest)
        }
    }
}

fn string_id(value: &serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => Some(s.clone()),
        // Integer ids are common in the wild; coerce them.
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_generic_record(
    record: &serde_json::Map<String, serde_json::Value>,
    lookup: &BTreeMap<&'static str, String>,
) -> Result<QAExample, String> {
    let field = |target: &str| record.get(lookup[target].as_str());

    let id = match field("id") {
        Some(v) => string_id(v).ok_or("id is not a string or integer")?,
        None => return Err(format!("missing field {:?}", lookup["id"])),
    };
    let question = match field("question") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(_) => return Err("question is not a string".to_string()),
        None => return Err(format!("missing field {:?}", lookup["question"])),
    };
    let context = match field("context") {
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(serde_json::Value::Null) | None => None,
        Some(_) => return Err("context is not a string".to_string()),
    };
    let reference_answers = match field("reference_answers") {
        Some(serde_json::Value::Array(items)) => {
            let mut refs = Vec::with_capacity(items.len());
            for item in items {
                match item {
                    serde_json::Value::String(s) => refs.push(s.clone()),
                    _ => return Err("reference_answers contains a non-string".to_string()),
                }
            }
            refs
        }
        // A single string is accepted as a one-element list.
        Some(serde_json::Value::String(s)) => vec![s.clone()],
        Some(serde_json::Value::Null) | None => Vec::new(),
        Some(_) => return Err("reference_answers is not an array or string".to_string()),
    };
    let short_label = match field("short_label") {
        Some(serde_json::Value::String(s)) => {
            Some(ShortLabel::from_str(s).map_err(|e| e.to_string())?)
        }
        Some(serde_json::Value::Null) | None => None,
        Some(_) => return Err("short_label is not a string".to_string()),
    };

    let example = QAExample {
        id,
        question,
        context,
        reference_answers,
        short_label,
    };
    example.validate()?;
    Ok(example)
}

fn load_generic_jsonl(manifest: &DatasetManifest) -> Result<LoadOutcome, DataError> {
    let file = std::fs::File::open(&manifest.path).map_err(|source| {
        DataError::UnreadableSource {
            path: manifest.path.clone(),
            source,
        }
    })?;
    let reader = std::io::BufReader::new(file);

    let lookup = resolve_field_map(&manifest.field_map)?;
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    let mut seen_ids = BTreeSet::new();
    let mut saw_any_record = false;

    for (idx, line) in reader.lines().enumerate() {
        if manifest.limit.is_some_and(|n| examples.len() >= n) {
            break;
        }
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::UnreadableSource {
            path: manifest.path.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        saw_any_record = true;
        let skip = |id: Option<String>, reason: String| SkippedRecord {
            line: Some(line_no),
            id,
            reason,
        };
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                skipped.push(skip(None, format!("invalid JSON: {e}")));
                continue;
            }
        };
        let Some(record) = value.as_object() else {
            skipped.push(skip(None, "record is not a JSON object".to_string()));
            continue;
        };
        match parse_generic_record(record, &lookup) {
            Ok(example) => {
                if !seen_ids.insert(example.id.clone()) {
                    skipped.push(skip(Some(example.id), "duplicate id".to_string()));
                    continue;
                }
                examples.push(example);
            }
            Err(reason) => {
                let id = record.get(lookup["id"].as_str()).and_then(string_id);
                skipped.push(skip(id, reason));
            }
        }
    }

    if !saw_any_record {
        return Err(DataError::EmptySource {
            path: manifest.path.clone(),
        });
    }
    if examples.is_empty() {
        return Err(DataError::AllRecordsMalformed {
            path: manifest.path.clone(),
            skipped: skipped.len(),
        });
    }
    Ok(LoadOutcome { examples, skipped })
}

fn parse_pubmedqa_record(
    id: &str,
    record: &serde_json::Value,
) -> Result<QAExample, String> {
    let record = record.as_object().ok_or("record is not a JSON object")?;
    let question = match record.get("QUESTION") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(_) => return Err("QUESTION is not a string".to_string()),
        None => return Err("missing field \"QUESTION\"".to_string()),
    };
    let context = match record.get("CONTEXTS") {
        Some(serde_json::Value::Array(items)) => {
            let mut parts = Vec::with_capacity(items.len());
            for item in items {
                match item {
                    serde_json::Value::String(s) => parts.push(s.as_str()),
                    _ => return Err("CONTEXTS contains a non-string".to_string()),
                }
            }
            if parts.is_empty() {
                None
            } else {
                Some(parts.join("\n\n"))
            }
        }
        Some(_) => return Err("CONTEXTS is not an array".to_string()),
        None => None,
    };
    let reference_answers = match record.get("LONG_ANSWER") {
        Some(serde_json::Value::String(s)) => vec![s.clone()],
        Some(_) => return Err("LONG_ANSWER is not a string".to_string()),
        None => Vec::new(),
    };
    let short_label = match record.get("final_decision") {
        Some(serde_json::Value::String(s)) => {
            Some(ShortLabel::from_str(s).map_err(|e| e.to_string())?)
        }
        Some(_) => return Err("final_decision is not a string".to_string()),
        None => None,
    };

    let example = QAExample {
        id: id.to_string(),
        question,
        context,
        reference_answers,
        short_label,
    };
    example.validate()?;
    Ok(example)
}

fn load_pubmedqa_json(manifest: &DatasetManifest) -> Result<LoadOutcome, DataError> {
    let text =
        std::fs::read_to_string(&manifest.path).map_err(|source| DataError::UnreadableSource {
            path: manifest.path.clone(),
            source,
        })?;
    // serde_json preserves object order here, so examples keep file order.
    let root: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)
        .map_err(|source| DataError::BadSourceJson {
            path: manifest.path.clone(),
            source,
        })?;
    if root.is_empty() {
        return Err(DataError::EmptySource {
            path: manifest.path.clone(),
        });
    }

    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for (id, record) in &root {
        if manifest.limit.is_some_and(|n| examples.len() >= n) {
            break;
        }
        match parse_pubmedqa_record(id, record) {
            Ok(example) => examples.push(example),
            Err(reason) => skipped.push(SkippedRecord {
                line: None,
                id: Some(id.clone()),
                reason,
            }),
        }
    }
    if examples.is_empty() {
        return Err(DataError::AllRecordsMalformed {
            path: manifest.path.clone(),
            skipped: skipped.len(),
        });
    }
    Ok(LoadOutcome { examples, skipped })
}

/// Writes examples to the generic JSON Lines format, one compact object per
/// line. `load_dataset` reads the result back unchanged.
pub fn write_generic_jsonl(path: &Path, examples: &[QAExample]) -> Result<(), DataError> {
    let mut out = String::new();
    for example in examples {
        out.push_str(&serde_json::to_string(example).expect("example serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DataError::UnreadableSource {
        path: path.to_path_buf(),
        source,
    })
}
