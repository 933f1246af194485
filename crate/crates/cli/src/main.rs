//! Command-line front end: execute runs, evaluate them, print combined
//! reports, and validate stored traces.
//!
//! Exit codes: 0 on success, 1 on a fatal error, 2 when the command finished
//! but individual examples failed or traces violated an invariant.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use reflectqa_core::config::LoopConfig;
use reflectqa_core::metrics::comparison_table;
use reflectqa_core::runner::{self, RunMode};

#[derive(Parser)]
#[command(
    name = "reflectqa",
    version,
    about = "Iterative self-reflection loops for grounded question answering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the run described by a manifest.
    Run(RunArgs),
    /// Score a finished run's answers and write report.json / report.txt.
    Eval(EvalArgs),
    /// Print a combined metrics table for already evaluated runs.
    Report(ReportArgs),
    /// Check every stored trace in a run against the loop invariants.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Override the manifest's dataset path.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Replace the loop configuration with a flat key = value TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single configuration field, e.g. --set threshold_factual=-0.5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Process only the first N dataset records.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    /// Number of worker threads.
    #[arg(long, value_name = "N")]
    parallelism: Option<usize>,
    /// Continue an interrupted run directory instead of refusing to reuse it.
    #[arg(long)]
    resume: bool,
    /// Answer each question with one unguided completion instead of the loop.
    #[arg(long)]
    baseline: bool,
    /// Replace the backend bindings with a TOML file (script paths resolve
    /// against that file's directory).
    #[arg(long)]
    backend: Option<PathBuf>,
    /// Directory that holds run outputs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory produced by `reflectqa run`.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory to include; repeat for side-by-side comparison.
    #[arg(long, required = true)]
    run: Vec<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Run directory produced by `reflectqa run`.
    #[arg(long)]
    run: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Usage errors exit 1 like every other invocation failure; clap's default
    // exit of 2 would collide with the completed-with-problems code.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
        Command::Validate(args) => cmd_validate(args),
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let mut manifest = runner::load_manifest(&args.manifest)
        .with_context(|| format!("loading manifest {}", args.manifest.display()))?;
    if let Some(path) = args.dataset {
        manifest.dataset.path = path;
    }
    if let Some(path) = &args.config {
        manifest.config = LoopConfig::from_flat_file(path)
            .with_context(|| format!("loading configuration {}", path.display()))?;
    }
    for pair in &args.set {
        let Some((key, value)) = pair.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {pair:?}");
        };
        manifest
            .config
            .apply_override(key.trim(), value.trim())
            .with_context(|| format!("applying --set {pair}"))?;
    }
    if let Some(limit) = args.limit {
        manifest.dataset.limit = Some(limit);
    }
    if let Some(parallelism) = args.parallelism {
        manifest.parallelism = parallelism;
    }
    if args.baseline {
        manifest.mode = RunMode::Baseline;
    }
    if let Some(path) = &args.backend {
        manifest.backend = runner::load_bindings(path)
            .with_context(|| format!("loading backend bindings {}", path.display()))?;
    }

    let summary = runner::execute_run(&manifest, &args.out, args.resume)?;
    let run_dir = args.out.join(&summary.run_id);
    println!("run {} finished: {}", summary.run_id, run_dir.display());
    println!(
        "  examples {}  converged {}  unconverged {}  errored {}  skipped records {}",
        summary.total,
        summary.converged,
        summary.unconverged,
        summary.errored,
        summary.skipped_records
    );
    match &summary.report {
        Some(report) => print!("{}", comparison_table(&[(summary.run_id.clone(), report)])),
        None => println!("  (no evaluation; run `reflectqa eval` once the backend can score)"),
    }
    if summary.errored > 0 {
        eprintln!(
            "{} example(s) failed; see {}",
            summary.errored,
            run_dir.join("errors").display()
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let (report, rendered) = runner::evaluate_run(&args.run)
        .with_context(|| format!("evaluating run {}", args.run.display()))?;
    print!("{rendered}");
    println!("report written to {}", args.run.join("report.json").display());
    if !report.failures.is_empty() {
        eprintln!("{} example(s) could not be scored", report.failures.len());
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let mut loaded = Vec::new();
    for dir in &args.run {
        let (run_id, report) = runner::load_report(dir)
            .with_context(|| format!("loading report from {}", dir.display()))?;
        loaded.push((run_id, report));
    }
    let rows: Vec<(String, &reflectqa_core::metrics::MetricReport)> = loaded
        .iter()
        .map(|(run_id, report)| (run_id.clone(), report))
        .collect();
    print!("{}", comparison_table(&rows));
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(args: ValidateArgs) -> Result<ExitCode> {
    let findings = runner::validate_run(&args.run)
        .with_context(|| format!("validating run {}", args.run.display()))?;
    if findings.is_empty() {
        println!("all traces satisfy the loop invariants");
        return Ok(ExitCode::SUCCESS);
    }
    let mut count = 0usize;
    for (trace, problems) in &findings {
        for problem in problems {
            println!("{trace}: {problem}");
            count += 1;
        }
    }
    eprintln!("{count} invariant violation(s) across {} trace file(s)", findings.len());
    Ok(ExitCode::from(2))
}
