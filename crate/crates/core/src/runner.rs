//! Run orchestration: a TOML manifest names a dataset, a loop configuration,
//! and backend bindings; executing it fills a run directory with one trace or
//! error record per example plus a summary, all written atomically and never
//! carrying timestamps, so reruns of the same manifest against deterministic
//! backends produce byte-identical directories.
//!
//! Resume skips every example that already has a parseable trace or an error
//! record; a truncated trace (no footer) is re-run.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::http::HttpBackend;
use crate::backend::mock::{MockScriptError, ScriptedBackend};
use crate::backend::retry::{RetryBackend, RetryPolicy};
use crate::backend::{Backend, BackendError, NliLabel, TokenScore};
use crate::config::LoopConfig;
use crate::data::{self, DataError, DatasetManifest};
use crate::metrics::{self, MetricReport, MetricsError};
use crate::prompts;
use crate::reflect::{self, ReflectError, ReflectionFailure};
use crate::trace::{LoopCounters, ReflectionTrace, TraceError, TraceEvent};
use crate::types::QAExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Full reflection loops per example.
    Loop,
    /// One unguided completion of the raw question per example.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingKind {
    Mock,
    Http,
}

/// One backend binding: a scripted mock (needs `script`) or a live HTTP
/// endpoint (needs `endpoint`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindingSpec {
    pub kind: BindingKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

fn default_retries() -> u32 {
    RetryPolicy::default().max_retries
}

fn default_max_new_tokens() -> usize {
    reflect::DEFAULT_MAX_NEW_TOKENS
}

/// Which backend serves each capability. Capabilities without their own
/// binding fall back to `default`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendBindings {
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<BindingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complete: Option<BindingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_tokens: Option<BindingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed: Option<BindingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nli: Option<BindingSpec>,
}

fn default_parallelism() -> usize {
    1
}

/// A complete run description, persisted (with resolved paths) into the run
/// directory so evaluation and validation can reconstruct everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    pub mode: RunMode,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Recorded for provenance; deterministic backends ignore it.
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetManifest,
    #[serde(default)]
    pub config: LoopConfig,
    pub backend: BackendBindings,
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse manifest {path}: {source}")]
    ManifestParse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid run manifest: {problems}")]
    InvalidManifest { problems: String },
    #[error("run directory {path} already exists (use resume to continue it)")]
    RunDirExists { path: PathBuf },
    #[error("no backend binding for capability {capability} and no default")]
    MissingBinding { capability: &'static str },
    #[error("bad backend binding for {capability}: {problem}")]
    BadBinding {
        capability: &'static str,
        problem: String,
    },
    #[error("trace {path} belongs to example {found}, expected {expected}")]
    TraceMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("trace {path} is unreadable: {source}")]
    Trace { path: PathBuf, source: TraceError },
    #[error("example {id} finished without a trace or error record")]
    MissingArtifact { id: String },
    #[error("run {run_id} has no completed traces to evaluate")]
    NothingToEvaluate { run_id: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Script(#[from] MockScriptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Run-level tallies plus the automatic evaluation, persisted as summary.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub mode: RunMode,
    pub total: usize,
    pub converged: usize,
    pub unconverged: usize,
    pub errored: usize,
    /// Dataset records the loader rejected.
    pub skipped_records: usize,
    /// Metric report over the successfully answered examples; absent when
    /// evaluation could not run (for example, every example errored).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricReport>,
}

/// What errors/<id>.json holds: the failure message plus whatever events had
/// accumulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub example_id: String,
    pub error: String,
    pub events: Vec<TraceEvent>,
}

fn resolve_path(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
    // The manifest copied into the run directory must keep working from any
    // working directory, so resolved paths are always made absolute.
    if let Ok(absolute) = std::path::absolute(&*path) {
        *path = absolute;
    }
}

/// Rewrites every relative path in the manifest against `base` and makes the
/// results absolute.
pub fn resolve_manifest_paths(manifest: &mut RunManifest, base: &Path) {
    resolve_path(base, &mut manifest.dataset.path);
    for spec in [
        &mut manifest.backend.default,
        &mut manifest.backend.complete,
        &mut manifest.backend.score_tokens,
        &mut manifest.backend.embed,
        &mut manifest.backend.nli,
    ]
    .into_iter()
    .flatten()
    {
        if let Some(script) = &mut spec.script {
            resolve_path(base, script);
        }
    }
}

/// Reads a standalone backend-bindings file and resolves its relative script
/// paths against the file's own directory.
pub fn load_bindings(path: &Path) -> Result<BackendBindings, RunnerError> {
    let text = std::fs::read_to_string(path).map_err(|source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut bindings: BackendBindings =
        toml::from_str(&text).map_err(|source| RunnerError::ManifestParse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for spec in [
        &mut bindings.default,
        &mut bindings.complete,
        &mut bindings.score_tokens,
        &mut bindings.embed,
        &mut bindings.nli,
    ]
    .into_iter()
    .flatten()
    {
        if let Some(script) = &mut spec.script {
            resolve_path(base, script);
        }
    }
    Ok(bindings)
}

/// Reads a manifest and resolves its relative paths against the manifest's
/// own directory.
pub fn load_manifest(path: &Path) -> Result<RunManifest, RunnerError> {
    let text = std::fs::read_to_string(path).map_err(|source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut manifest: RunManifest =
        toml::from_str(&text).map_err(|source| RunnerError::ManifestParse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    resolve_manifest_paths(&mut manifest, base);
    Ok(manifest)
}

fn validate_manifest(manifest: &RunManifest) -> Vec<String> {
    let mut problems = manifest.config.validate();
    if manifest.run_id.is_empty()
        || !manifest
            .run_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        || manifest.run_id.starts_with('.')
    {
        problems.push(
            "run_id must be non-empty, use only [A-Za-z0-9._-], and not start with a dot"
                .to_string(),
        );
    }
    if manifest.parallelism < 1 {
        problems.push("parallelism must be ≥ 1".to_string());
    }
    let pool = prompts::default_demonstrations().len();
    if manifest.config.demo_count as usize > pool {
        problems.push(format!(
            "demo_count exceeds the built-in demonstration pool ({pool})"
        ));
    }
    if manifest.backend.max_new_tokens == 0 {
        problems.push("max_new_tokens must be ≥ 1".to_string());
    }
    problems
}

/// Routes each capability to its bound backend.
pub struct CompositeBackend {
    complete: Arc<dyn Backend>,
    score_tokens: Arc<dyn Backend>,
    embed: Arc<dyn Backend>,
    nli: Arc<dyn Backend>,
}

impl Backend for CompositeBackend {
    fn complete(&self, prompt: &str, max_new_tokens: usize) -> Result<String, BackendError> {
        self.complete.complete(prompt, max_new_tokens)
    }
    fn score_tokens(
        &self,
        prompt: &str,
        continuation: &str,
    ) -> Result<Vec<TokenScore>, BackendError> {
        self.score_tokens.score_tokens(prompt, continuation)
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.embed.embed(text)
    }
    fn nli_classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, BackendError> {
        self.nli.nli_classify(premise, hypothesis)
    }
}

fn build_one(
    capability: &'static str,
    spec: &BindingSpec,
    scripts: &mut HashMap<PathBuf, Arc<ScriptedBackend>>,
) -> Result<Arc<dyn Backend>, RunnerError> {
    match spec.kind {
        BindingKind::Mock => {
            let path = spec.script.as_ref().ok_or(RunnerError::BadBinding {
                capability,
                problem: "mock bindings need a script path".to_string(),
            })?;
            if let Some(existing) = scripts.get(path) {
                return Ok(existing.clone());
            }
            let backend = Arc::new(ScriptedBackend::from_file(path)?);
            scripts.insert(path.clone(), backend.clone());
            Ok(backend)
        }
        BindingKind::Http => {
            let endpoint = spec.endpoint.as_ref().ok_or(RunnerError::BadBinding {
                capability,
                problem: "http bindings need an endpoint".to_string(),
            })?;
            Ok(Arc::new(HttpBackend::new(endpoint)))
        }
    }
}

/// Builds the run's backend from its bindings: per-capability backends (mock
/// scripts are loaded once per distinct path) composed and wrapped in the
/// retry policy.
pub fn build_backend(
    bindings: &BackendBindings,
) -> Result<RetryBackend<CompositeBackend>, RunnerError> {
    let mut scripts = HashMap::new();
    let mut pick = |capability: &'static str,
                    own: &Option<BindingSpec>|
     -> Result<Arc<dyn Backend>, RunnerError> {
        let spec = own
            .as_ref()
            .or(bindings.default.as_ref())
            .ok_or(RunnerError::MissingBinding { capability })?;
        build_one(capability, spec, &mut scripts)
    };
    let composite = CompositeBackend {
        complete: pick("complete", &bindings.complete)?,
        score_tokens: pick("score_tokens", &bindings.score_tokens)?,
        embed: pick("embed", &bindings.embed)?,
        nli: pick("nli", &bindings.nli)?,
    };
    let policy = RetryPolicy {
        max_retries: bindings.retries,
        ..RetryPolicy::default()
    };
    Ok(RetryBackend::new(composite, policy))
}

/// Writes via a temp file and rename so readers never see partial content.
fn write_atomic(path: &Path, content: &[u8]) -> Result<(), RunnerError> {
    let io_err = |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

/// Filesystem-safe stem for an example's artifacts. Ids that are already
/// safe are used as-is; anything else gets sanitized plus a short content
/// hash to stay collision-free.
fn artifact_stem(id: &str) -> String {
    let safe = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if safe {
        return id.to_string();
    }
    let sanitized: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect();
    let digest = Sha256::digest(id.as_bytes());
    let tag: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
    format!("{sanitized}-{tag}")
}

fn trace_path(run_dir: &Path, id: &str) -> PathBuf {
    run_dir.join("traces").join(format!("{}.jsonl", artifact_stem(id)))
}

fn error_path(run_dir: &Path, id: &str) -> PathBuf {
    run_dir.join("errors").join(format!("{}.json", artifact_stem(id)))
}

fn is_done(run_dir: &Path, id: &str) -> bool {
    ReflectionTrace::from_file(&trace_path(run_dir, id)).is_ok()
        || error_path(run_dir, id).exists()
}

/// The baseline treatment: complete the raw question once, no knowledge, no
/// gates. The trace shape stays uniform with loop runs.
pub fn baseline_trace(
    example: &QAExample,
    backend: &dyn Backend,
    max_new_tokens: usize,
) -> Result<ReflectionTrace, ReflectionFailure> {
    let fail = |error: ReflectError| ReflectionFailure {
        example_id: example.id.clone(),
        error,
        events: Vec::new(),
    };
    let raw = backend
        .complete(&example.question, max_new_tokens)
        .map_err(|e| fail(ReflectError::Backend(e)))?;
    let answer = raw.trim().to_string();
    if answer.is_empty() {
        return Err(fail(ReflectError::EmptyGeneration { what: "answer" }));
    }
    Ok(ReflectionTrace {
        example_id: example.id.clone(),
        events: vec![
            TraceEvent::AnswerGenerated {
                text: answer.clone(),
                revision: 0,
            },
            TraceEvent::Converged,
        ],
        final_answer: answer,
        converged: true,
        loop_counters: LoopCounters {
            main: 1,
            knowledge: 0,
            answer: 1,
        },
    })
}

/// Executes a run into `out_root/<run_id>`: one worker pool over the pending
/// examples, one trace or error record per example, then the automatic
/// evaluation (report.json / report.txt) and summary.json. `resume` continues
/// an existing directory, skipping finished examples.
pub fn execute_run(
    manifest: &RunManifest,
    out_root: &Path,
    resume: bool,
) -> Result<RunSummary, RunnerError> {
    let problems = validate_manifest(manifest);
    if !problems.is_empty() {
        return Err(RunnerError::InvalidManifest {
            problems: problems.join("; "),
        });
    }
    // Paths that are still relative (for example from command-line overrides)
    // resolve against the working directory; the stored manifest must not
    // depend on where later commands are invoked from.
    let mut manifest = manifest.clone();
    resolve_manifest_paths(&mut manifest, Path::new("."));
    let manifest = &manifest;

    let run_dir = out_root.join(&manifest.run_id);
    if run_dir.exists() && !resume {
        return Err(RunnerError::RunDirExists { path: run_dir });
    }
    for sub in ["traces", "errors"] {
        let dir = run_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|source| RunnerError::Io { path: dir, source })?;
    }
    let manifest_text = toml::to_string_pretty(manifest).expect("manifest serializes");
    write_atomic(&run_dir.join("manifest.toml"), manifest_text.as_bytes())?;

    let loaded = data::load_dataset(&manifest.dataset)?;
    let backend = build_backend(&manifest.backend)?;
    let demos = &prompts::default_demonstrations()[..manifest.config.demo_count as usize];

    let pending: Vec<&QAExample> = loaded
        .examples
        .iter()
        .filter(|ex| !is_done(&run_dir, &ex.id))
        .collect();

    let next = AtomicUsize::new(0);
    let write_failures: Mutex<Vec<RunnerError>> = Mutex::new(Vec::new());
    let workers = manifest.parallelism.min(pending.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= pending.len() {
                    break;
                }
                let example = pending[i];
                let result = match manifest.mode {
                    RunMode::Loop => reflect::run_reflection_with(
                        example,
                        &manifest.config,
                        &backend,
                        demos,
                        manifest.backend.max_new_tokens,
                    )
                    .map(|outcome| outcome.trace),
                    RunMode::Baseline => {
                        baseline_trace(example, &backend, manifest.backend.max_new_tokens)
                    }
                };
                let written = match result {
                    Ok(trace) => write_atomic(
                        &trace_path(&run_dir, &example.id),
                        trace.to_jsonl().as_bytes(),
                    ),
                    Err(failure) => {
                        let record = ErrorRecord {
                            example_id: failure.example_id.clone(),
                            error: failure.error.to_string(),
                            events: failure.events,
                        };
                        let json =
                            serde_json::to_string_pretty(&record).expect("record serializes");
                        write_atomic(&error_path(&run_dir, &example.id), json.as_bytes())
                    }
                };
                if let Err(e) = written {
                    write_failures.lock().unwrap().push(e);
                    break;
                }
            });
        }
    });
    if let Some(failure) = write_failures.into_inner().unwrap().into_iter().next() {
        return Err(failure);
    }

    // Tally from disk so fresh runs and resumes report identically.
    let mut summary = RunSummary {
        run_id: manifest.run_id.clone(),
        mode: manifest.mode,
        total: loaded.examples.len(),
        converged: 0,
        unconverged: 0,
        errored: 0,
        skipped_records: loaded.skipped.len(),
        report: None,
    };
    for example in &loaded.examples {
        let path = trace_path(&run_dir, &example.id);
        match ReflectionTrace::from_file(&path) {
            Ok(trace) => {
                if trace.example_id != example.id {
                    return Err(RunnerError::TraceMismatch {
                        path,
                        expected: example.id.clone(),
                        found: trace.example_id,
                    });
                }
                if trace.converged {
                    summary.converged += 1;
                } else {
                    summary.unconverged += 1;
                }
            }
            Err(_) if error_path(&run_dir, &example.id).exists() => summary.errored += 1,
            Err(_) => {
                return Err(RunnerError::MissingArtifact {
                    id: example.id.clone(),
                })
            }
        }
    }
    // Evaluate whatever answered successfully. Evaluation trouble (an
    // unscorable corpus, a backend without the scoring capabilities) is not
    // a run failure: the traces stand on their own and `evaluate_run` can
    // retry later.
    summary.report = match evaluate_answers(&run_dir, manifest, &loaded.examples, &backend) {
        Ok((report, _)) => Some(report),
        Err(err) => {
            log::warn!(
                "run {} finished but automatic evaluation did not: {err}",
                manifest.run_id
            );
            None
        }
    };
    let summary_json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&run_dir.join("summary.json"), summary_json.as_bytes())?;
    Ok(summary)
}

/// Pairs each completed trace's final answer with its example (dataset
/// order), computes the metric report, and writes report.json plus a rendered
/// report.txt into the run directory.
fn evaluate_answers(
    run_dir: &Path,
    manifest: &RunManifest,
    examples: &[QAExample],
    backend: &dyn Backend,
) -> Result<(MetricReport, String), RunnerError> {
    let mut items = Vec::new();
    for example in examples {
        let path = trace_path(run_dir, &example.id);
        match ReflectionTrace::from_file(&path) {
            Ok(trace) => {
                if trace.example_id != example.id {
                    return Err(RunnerError::TraceMismatch {
                        path,
                        expected: example.id.clone(),
                        found: trace.example_id,
                    });
                }
                items.push((example.clone(), trace.final_answer));
            }
            // Not run (or died mid-write): nothing to evaluate for it.
            Err(TraceError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => continue,
            Err(TraceError::Incomplete { .. }) => continue,
            Err(source) => return Err(RunnerError::Trace { path, source }),
        }
    }
    if items.is_empty() {
        return Err(RunnerError::NothingToEvaluate {
            run_id: manifest.run_id.clone(),
        });
    }

    let report = metrics::evaluate_corpus(&items, backend, &manifest.config)?;
    let table = metrics::comparison_table(&[(manifest.run_id.clone(), &report)]);
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&run_dir.join("report.json"), report_json.as_bytes())?;
    write_atomic(&run_dir.join("report.txt"), table.as_bytes())?;
    Ok((report, table))
}

/// Re-evaluates a finished run from its persisted answers: loads the stored
/// manifest, rebuilds the backend, recomputes the report, and rewrites
/// report.json / report.txt. Returns the report and the rendered table.
pub fn evaluate_run(run_dir: &Path) -> Result<(MetricReport, String), RunnerError> {
    let manifest = load_manifest(&run_dir.join("manifest.toml"))?;
    let loaded = data::load_dataset(&manifest.dataset)?;
    let backend = build_backend(&manifest.backend)?;
    evaluate_answers(run_dir, &manifest, &loaded.examples, &backend)
}

/// Loads a run's stored report.
pub fn load_report(run_dir: &Path) -> Result<(String, MetricReport), RunnerError> {
    let manifest = load_manifest(&run_dir.join("manifest.toml"))?;
    let path = run_dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|source| RunnerError::Io {
        path: path.clone(),
        source,
    })?;
    let report: MetricReport = serde_json::from_str(&text).map_err(|e| RunnerError::Io {
        path,
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })?;
    Ok((manifest.run_id, report))
}

/// Checks every trace in a run directory against the run's configuration.
/// Returns (example id or file name, violations) for each bad trace; empty
/// means the run is internally consistent.
pub fn validate_run(run_dir: &Path) -> Result<Vec<(String, Vec<String>)>, RunnerError> {
    let manifest = load_manifest(&run_dir.join("manifest.toml"))?;
    let traces_dir = run_dir.join("traces");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&traces_dir)
        .map_err(|source| RunnerError::Io {
            path: traces_dir.clone(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
        .collect();
    entries.sort();

    let mut findings = Vec::new();
    for path in entries {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match ReflectionTrace::from_file(&path) {
            Ok(trace) => {
                let violations = reflect::validate_trace(&trace, &manifest.config);
                if !violations.is_empty() {
                    findings.push((trace.example_id, violations));
                }
            }
            Err(e) => findings.push((name, vec![format!("unparseable trace: {e}")])),
        }
    }
    Ok(findings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::ScriptBuilder;
    use crate::config::Ablation;
    use crate::prompts::{self, names};

    /// Two-question corpus plus a script covering baseline and loop runs and
    /// their evaluations.
    struct Fixture {
        dir: tempfile::TempDir,
        corpus: PathBuf,
        script: PathBuf,
    }

    fn question(i: usize) -> String {
        format!("Does drug D{i} treat illness I{i}?")
    }

    fn context(i: usize) -> String {
        format!("Drug D{i} treats illness I{i} effectively.")
    }

    fn loop_answer(i: usize) -> String {
        format!("Drug D{i} treats illness I{i}.")
    }

    fn baseline_answer(i: usize) -> String {
        format!("Probably D{i} works.")
    }

    fn knowledge(i: usize) -> String {
        format!("knowledge-{i}")
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let examples: Vec<QAExample> = (0..2)
            .map(|i| QAExample {
                id: format!("ex{i}"),
                question: question(i),
                context: Some(context(i)),
                reference_answers: vec![loop_answer(i)],
                short_label: None,
            })
            .collect();
        let corpus = dir.path().join("corpus.jsonl");
        data::write_generic_jsonl(&corpus, &examples).unwrap();

        let mut b = ScriptBuilder::new();
        let demos = &prompts::default_demonstrations()[..1];
        for i in 0..2 {
            let q = question(i);
            let k = knowledge(i);
            let a = loop_answer(i);
            let ba = baseline_answer(i);
            let ctx = context(i);
            // Loop run.
            let kp = prompts::render(names::KNOWLEDGE_GEN, &[("question", q.as_str())]).unwrap();
            b.complete(&kp, &k);
            let fp = prompts::render_factuality_prompt(&q, demos).unwrap();
            b.score_tokens(&fp, &k, &[-0.5]);
            let ap = prompts::render(names::ANSWER_GEN, &[
                ("knowledge", k.as_str()),
                ("question", q.as_str()),
            ])
            .unwrap();
            b.complete(&ap, &a);
            let a_tokens = vec![-1.0; a.split_whitespace().count()];
            b.score_tokens(&format!("{k}\n"), &a, &a_tokens);
            b.embed(&q, &[1.0, 0.0]);
            b.embed(&a, &[1.0, 0.0]);
            // Baseline run: the raw question is the whole prompt.
            b.complete(&q, &ba);
            // Evaluation of both answers against the context grounding.
            for answer in [&a, &ba] {
                b.nli(&ctx, answer, NliLabel::Entail);
                let t = vec![-2.0; answer.split_whitespace().count()];
                b.score_tokens(&format!("{ctx}\n"), answer, &t);
            }
        }
        let script = dir.path().join("script.json");
        std::fs::write(&script, b.into_script().to_json()).unwrap();
        Fixture { dir, corpus, script }
    }

    fn manifest(f: &Fixture, run_id: &str, mode: RunMode) -> RunManifest {
        RunManifest {
            run_id: run_id.to_string(),
            mode,
            parallelism: 1,
            seed: 0,
            dataset: DatasetManifest {
                name: "unit".to_string(),
                format: crate::data::DatasetFormat::GenericJsonl,
                path: f.corpus.clone(),
                field_map: Default::default(),
                limit: None,
            },
            config: LoopConfig::default(),
            backend: BackendBindings {
                retries: 0,
                max_new_tokens: 64,
                default: Some(BindingSpec {
                    kind: BindingKind::Mock,
                    script: Some(f.script.clone()),
                    endpoint: None,
                }),
                complete: None,
                score_tokens: None,
                embed: None,
                nli: None,
            },
        }
    }

    #[test]
    fn loop_run_writes_traces_summary_and_report() {
        let f = fixture();
        let out = f.dir.path().join("runs");
        let m = manifest(&f, "unit-loop", RunMode::Loop);
        let summary = execute_run(&m, &out, false).unwrap();
        assert_eq!(summary.run_id, "unit-loop");
        assert_eq!(summary.mode, RunMode::Loop);
        assert_eq!(
            (summary.total, summary.converged, summary.unconverged, summary.errored),
            (2, 2, 0, 0)
        );
        assert_eq!(summary.skipped_records, 0);
        // The run evaluates itself; the embedded report matches a recompute.
        let embedded = summary.report.expect("run evaluates automatically");
        assert_eq!(embedded.rows.len(), 2);

        let run_dir = out.join("unit-loop");
        assert!(run_dir.join("manifest.toml").exists());
        assert!(run_dir.join("summary.json").exists());
        let trace = ReflectionTrace::from_file(&run_dir.join("traces/ex0.jsonl")).unwrap();
        assert_eq!(trace.final_answer, loop_answer(0));
        assert!(reflect::validate_trace(&trace, &m.config).is_empty());

        let (report, table) = evaluate_run(&run_dir).unwrap();
        assert_eq!(report, embedded);
        assert_eq!(report.rows.len(), 2);
        let means = report.means.unwrap();
        // Scripted: every answer entails its context and F1 vs itself is 1.
        assert_eq!(means.nli_sample, 1.0);
        assert_eq!(means.f1, 1.0);
        assert_eq!(means.consistency, -2.0);
        assert!(table.contains("unit-loop"));
        assert!(run_dir.join("report.json").exists());
        assert!(run_dir.join("report.txt").exists());
    }

    #[test]
    fn baseline_run_produces_uniform_single_shot_traces() {
        let f = fixture();
        let out = f.dir.path().join("runs");
        let m = manifest(&f, "unit-base", RunMode::Baseline);
        let summary = execute_run(&m, &out, false).unwrap();
        assert_eq!((summary.total, summary.converged, summary.errored), (2, 2, 0));

        let run_dir = out.join("unit-base");
        let trace = ReflectionTrace::from_file(&run_dir.join("traces/ex1.jsonl")).unwrap();
        assert_eq!(trace.final_answer, baseline_answer(1));
        assert_eq!(trace.loop_counters, LoopCounters { main: 1, knowledge: 0, answer: 1 });
        assert_eq!(trace.events.len(), 2);
        assert!(reflect::validate_trace(&trace, &m.config).is_empty());
        // Baseline answers go through the same evaluation path.
        let (report, _) = evaluate_run(&run_dir).unwrap();
        assert_eq!(report.rows.len(), 2);
    }

    #[test]
    fn existing_run_dir_requires_resume() {
        let f = fixture();
        let out = f.dir.path().join("runs");
        let m = manifest(&f, "unit-loop", RunMode::Loop);
        execute_run(&m, &out, false).unwrap();
        let err = execute_run(&m, &out, false).unwrap_err();
        assert!(matches!(err, RunnerError::RunDirExists { .. }), "{err}");
    }

    #[test]
    fn resume_reruns_only_unfinished_examples_identically() {
        let f = fixture();
        let out_a = f.dir.path().join("runs-a");
        let out_b = f.dir.path().join("runs-b");
        let m = manifest(&f, "unit-loop", RunMode::Loop);
        execute_run(&m, &out_a, false).unwrap();

        // Simulate an interrupted run: ex0's trace is complete, ex1's was
        // truncated mid-write (footer missing).
        let dir_b = out_b.join("unit-loop/traces");
        std::fs::create_dir_all(&dir_b).unwrap();
        std::fs::copy(out_a.join("unit-loop/traces/ex0.jsonl"), dir_b.join("ex0.jsonl")).unwrap();
        let full = std::fs::read_to_string(out_a.join("unit-loop/traces/ex1.jsonl")).unwrap();
        let cut = full.lines().take(3).collect::<Vec<_>>().join("\n");
        std::fs::write(dir_b.join("ex1.jsonl"), cut).unwrap();

        let summary = execute_run(&m, &out_b, true).unwrap();
        assert_eq!((summary.total, summary.converged), (2, 2));
        for name in ["ex0.jsonl", "ex1.jsonl"] {
            let a = std::fs::read(out_a.join("unit-loop/traces").join(name)).unwrap();
            let b = std::fs::read(out_b.join("unit-loop/traces").join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after resume");
        }
    }

    #[test]
    fn parallel_runs_match_serial_runs_byte_for_byte() {
        let f = fixture();
        let out_serial = f.dir.path().join("runs-serial");
        let out_parallel = f.dir.path().join("runs-par");
        let m = manifest(&f, "unit-loop", RunMode::Loop);
        execute_run(&m, &out_serial, false).unwrap();
        let mut mp = m.clone();
        mp.parallelism = 4;
        execute_run(&mp, &out_parallel, false).unwrap();
        for name in ["ex0.jsonl", "ex1.jsonl"] {
            let a = std::fs::read(out_serial.join("unit-loop/traces").join(name)).unwrap();
            let b = std::fs::read(out_parallel.join("unit-loop/traces").join(name)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn backend_failures_become_error_records_not_fatal() {
        let f = fixture();
        // A script that only covers baseline completions for ex0.
        let mut b = ScriptBuilder::new();
        b.complete(&question(0), &baseline_answer(0));
        std::fs::write(&f.script, b.into_script().to_json()).unwrap();

        let out = f.dir.path().join("runs");
        let m = manifest(&f, "unit-base", RunMode::Baseline);
        let summary = execute_run(&m, &out, false).unwrap();
        assert_eq!((summary.total, summary.converged, summary.errored), (2, 1, 1));

        let record: ErrorRecord = serde_json::from_str(
            &std::fs::read_to_string(out.join("unit-base/errors/ex1.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(record.example_id, "ex1");
        assert!(record.error.contains("no scripted response"), "{}", record.error);
    }

    #[test]
    fn manifest_round_trips_through_toml_with_resolved_paths() {
        let f = fixture();
        let m = manifest(&f, "unit-loop", RunMode::Loop);
        let text = toml::to_string_pretty(&m).unwrap();
        let parsed: RunManifest = toml::from_str(&text).unwrap();
        assert_eq!(parsed, m);
    }

    #[test]
    fn relative_manifest_paths_resolve_against_the_manifest_dir() {
        let f = fixture();
        let mut m = manifest(&f, "unit-loop", RunMode::Loop);
        m.dataset.path = PathBuf::from("corpus.jsonl");
        m.backend.default.as_mut().unwrap().script = Some(PathBuf::from("script.json"));
        let path = f.dir.path().join("run.toml");
        std::fs::write(&path, toml::to_string_pretty(&m).unwrap()).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.dataset.path, f.corpus);
        assert_eq!(loaded.backend.default.unwrap().script.unwrap(), f.script);
    }

    #[test]
    fn bad_manifests_are_rejected_up_front() {
        let f = fixture();
        let out = f.dir.path().join("runs");

        let mut m = manifest(&f, "bad id", RunMode::Loop);
        let err = execute_run(&m, &out, false).unwrap_err();
        assert!(matches!(err, RunnerError::InvalidManifest { .. }), "{err}");

        m = manifest(&f, "unit", RunMode::Loop);
        m.config.demo_count = 4;
        let err = execute_run(&m, &out, false).unwrap_err();
        assert!(
            err.to_string().contains("demonstration pool"),
            "unexpected error: {err}"
        );

        m = manifest(&f, "unit", RunMode::Loop);
        m.backend.default = None;
        let err = execute_run(&m, &out, false).unwrap_err();
        assert!(matches!(err, RunnerError::MissingBinding { .. }), "{err}");
    }

    #[test]
    fn demo_count_zero_is_valid_without_refinement() {
        let f = fixture();
        let out = f.dir.path().join("runs");
        let mut m = manifest(&f, "unit-nr", RunMode::Loop);
        m.config.ablation = Ablation::NoRefinement;
        m.config.demo_count = 0;
        // The no-refinement loop needs only completions and embeddings.
        let mut b = ScriptBuilder::new();
        for i in 0..2 {
            let q = question(i);
            let kp = prompts::render(names::KNOWLEDGE_GEN, &[("question", q.as_str())]).unwrap();
            b.complete(&kp, &knowledge(i));
            let ap = prompts::render(names::ANSWER_GEN, &[
                ("knowledge", knowledge(i).as_str()),
                ("question", q.as_str()),
            ])
            .unwrap();
            b.complete(&ap, &loop_answer(i));
            b.embed(&q, &[1.0, 0.0]);
            b.embed(&loop_answer(i), &[1.0, 0.0]);
        }
        std::fs::write(&f.script, b.into_script().to_json()).unwrap();
        let summary = execute_run(&m, &out, false).unwrap();
        assert_eq!((summary.converged, summary.errored), (2, 0));
    }

    #[test]
    fn validate_run_reports_tampered_traces() {
        let f = fixture();
        let out = f.dir.path().join("runs");
        let m = manifest(&f, "unit-loop", RunMode::Loop);
        execute_run(&m, &out, false).unwrap();
        let run_dir = out.join("unit-loop");
        assert!(validate_run(&run_dir).unwrap().is_empty());

        // Corrupt one trace: flip its convergence flag in the footer.
        let path = run_dir.join("traces/ex0.jsonl");
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"converged\":true", "\"converged\":false")).unwrap();
        let findings = validate_run(&run_dir).unwrap();
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].0, "ex0");
        assert!(findings[0].1.iter().any(|v| v.contains("converged flag")));
    }

    #[test]
    fn unsafe_ids_get_distinct_artifact_stems() {
        assert_eq!(artifact_stem("ex-1.a"), "ex-1.a");
        let slash = artifact_stem("a/b");
        let under = artifact_stem("a_b");
        assert_ne!(slash, under);
        assert!(slash.starts_with("a_b-"));
        assert_ne!(artifact_stem(".."), "..");
        assert!(!artifact_stem("..").starts_with('.'));
    }

    #[test]
    fn shipped_example_manifests_parse_and_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests");
        let mut checked = 0;
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                let manifest = load_manifest(&path)
                    .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                let problems = validate_manifest(&manifest);
                assert!(problems.is_empty(), "{}: {problems:?}", path.display());
                checked += 1;
            }
        }
        assert!(checked >= 5, "expected the shipped example manifests, found {checked}");
    }
}
