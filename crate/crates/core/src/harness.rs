//! Benchmark harness: run a task suite across backends and repetitions and
//! aggregate attempts-to-pass, pass rates and token totals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{ChatBackend, Embedder, TokenUsage};
use crate::config::Config;
use crate::rag::RagIndex;
use crate::runner::{RunRecord, RunStatus, Runner};
use crate::validate::ValidatorSpec;

/// The four shipped fixtures.
pub const DEFAULT_SUITE: &str = include_str!("../fixtures/default_suite.toml");

pub const SUITE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkTask {
    pub task_id: String,
    pub prompt: String,
    pub validator: ValidatorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_override_s: Option<f64>,
    #[serde(default)]
    pub rag_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    pub schema_version: u32,
    #[serde(default = "one")]
    pub repetitions: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_attempts: Option<u32>,
    pub tasks: Vec<BenchmarkTask>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("duplicate task_id `{0}`")]
    DuplicateTask(String),
}

impl Suite {
    pub fn from_toml(text: &str) -> Result<Self, SuiteError> {
        let suite: Suite = toml::from_str(text).map_err(|e| SuiteError::Schema(e.to_string()))?;
        if suite.schema_version != SUITE_SCHEMA_VERSION {
            return Err(SuiteError::Schema(format!(
                "unsupported schema_version {}",
                suite.schema_version
            )));
        }
        if suite.repetitions == 0 {
            return Err(SuiteError::Schema("repetitions must be >= 1".into()));
        }
        if suite.max_attempts == Some(0) {
            return Err(SuiteError::Schema("max_attempts must be >= 1".into()));
        }
        let mut seen = BTreeSet::new();
        for task in &suite.tasks {
            if task.task_id.trim().is_empty() || task.prompt.trim().is_empty() {
                return Err(SuiteError::Schema("task_id and prompt must be non-empty".into()));
            }
            if !seen.insert(task.task_id.as_str()) {
                return Err(SuiteError::DuplicateTask(task.task_id.clone()));
            }
            task.validator
                .check()
                .map_err(|e| SuiteError::Schema(format!("task `{}`: {e}", task.task_id)))?;
            if task.timeout_override_s.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
                return Err(SuiteError::Schema(format!(
                    "task `{}`: timeout_override_s must be > 0",
                    task.task_id
                )));
            }
        }
        Ok(suite)
    }

    pub fn default_suite() -> Self {
        Self::from_toml(DEFAULT_SUITE).expect("shipped suite is valid")
    }
}

/// Load a fixture file; tasks keep file order.
pub fn load_suite(path: &Path) -> Result<Suite, SuiteError> {
    let text = fs::read_to_string(path).map_err(|source| SuiteError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Suite::from_toml(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub attempt_index: u32,
    pub exception_class: String,
    pub traceback_tail: String,
    pub usage: TokenUsage,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub backend_name: String,
    pub repetition: u32,
    pub passed: bool,
    pub attempts_to_pass: Option<u32>,
    pub status: RunStatus,
    pub traces: Vec<IterationTrace>,
    pub wall_clock_ms: u64,
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TaskResult {
    pub fn from_run(task_id: &str, repetition: u32, run: &RunRecord, wall: Duration) -> Self {
        let traces = run
            .attempts
            .iter()
            .map(|a| IterationTrace {
                attempt_index: a.index,
                exception_class: a
                    .failure
                    .as_ref()
                    .map(|f| f.exception_class.clone())
                    .unwrap_or_else(|| if a.validation.passed { "None".into() } else { "Unknown".into() }),
                traceback_tail: a.failure.as_ref().map(|f| f.tail.clone()).unwrap_or_default(),
                usage: a.usage,
                passed: a.validation.passed,
            })
            .collect();
        let attempts_to_pass = run.attempts_to_pass();
        Self {
            task_id: task_id.to_string(),
            backend_name: run.backend.clone(),
            repetition,
            passed: attempts_to_pass.is_some(),
            attempts_to_pass,
            status: run.status,
            traces,
            wall_clock_ms: wall.as_millis() as u64,
            run_id: run.run_id.clone(),
            error: run.error.clone(),
        }
    }

    pub fn usage(&self) -> TokenUsage {
        self.traces.iter().map(|t| t.usage).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBackendSummary {
    pub task_id: String,
    pub backend_name: String,
    pub repetitions: u32,
    pub passes: u32,
    pub pass_rate: f64,
    /// Count of passing repetitions per attempt index, 1..=max_attempts.
    pub attempts_histogram: Vec<u32>,
    pub token_totals: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub max_attempts: u32,
    pub rows: Vec<TaskBackendSummary>,
    pub results: Vec<TaskResult>,
}

impl BenchmarkReport {
    /// Aggregate raw results. Rows follow first appearance of each
    /// (task, backend) pair in `task_order` × `backend_order`.
    pub fn aggregate(
        max_attempts: u32,
        task_order: &[String],
        backend_order: &[String],
        mut results: Vec<TaskResult>,
    ) -> Self {
        let pos = |list: &[String], x: &str| list.iter().position(|y| y == x).unwrap_or(usize::MAX);
        results.sort_by(|a, b| {
            (pos(task_order, &a.task_id), pos(backend_order, &a.backend_name), a.repetition).cmp(&(
                pos(task_order, &b.task_id),
                pos(backend_order, &b.backend_name),
                b.repetition,
            ))
        });
        let mut grouped: BTreeMap<(usize, usize), Vec<&TaskResult>> = BTreeMap::new();
        for r in &results {
            grouped
                .entry((pos(task_order, &r.task_id), pos(backend_order, &r.backend_name)))
                .or_default()
                .push(r);
        }
        let rows = grouped
            .into_values()
            .map(|group| {
                let mut histogram = vec![0u32; max_attempts as usize];
                for r in &group {
                    if let Some(k) = r.attempts_to_pass {
                        if let Some(bin) = histogram.get_mut(k as usize - 1) {
                            *bin += 1;
                        }
                    }
                }
                let passes = group.iter().filter(|r| r.passed).count() as u32;
                let reps = group.len() as u32;
                TaskBackendSummary {
                    task_id: group[0].task_id.clone(),
                    backend_name: group[0].backend_name.clone(),
                    repetitions: reps,
                    passes,
                    pass_rate: passes as f64 / reps as f64,
                    attempts_histogram: histogram,
                    token_totals: group.iter().map(|r| r.usage()).sum(),
                }
            })
            .collect();
        Self {
            max_attempts,
            rows,
            results,
        }
    }

    pub fn token_totals(&self) -> TokenUsage {
        self.rows.iter().map(|r| r.token_totals).sum()
    }
}

/// A backend taking part in a benchmark.
pub struct BenchBackend {
    pub backend: Arc<dyn ChatBackend>,
}

/// Run every (task, backend, repetition) triple. Runs execute concurrently
/// up to `config.bench.parallelism`; each run is internally sequential.
pub fn run_benchmark(
    suite: &Suite,
    backends: &[Arc<dyn ChatBackend>],
    config: &Config,
    rag: Option<(&RagIndex, &dyn Embedder)>,
    prefix: Option<&Path>,
) -> BenchmarkReport {
    let max_attempts = suite.max_attempts.unwrap_or(config.policy.max_attempts);
    let mut jobs = Vec::new();
    for task in &suite.tasks {
        for backend in backends {
            for rep in 1..=suite.repetitions {
                jobs.push((task, Arc::clone(backend), rep));
            }
        }
    }
    let queue = Mutex::new(jobs.into_iter());
    let results = Mutex::new(Vec::new());
    let workers = config.bench.parallelism.max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some((task, backend, rep)) = queue.lock().unwrap().next() else {
                    break;
                };
                let mut runner = Runner::new(config, backend)
                    .with_max_attempts(max_attempts)
                    .with_persistence(prefix.map(Path::to_path_buf));
                if let Some(t) = task.timeout_override_s {
                    runner = runner.with_exec_timeout(Duration::from_secs_f64(t));
                }
                if task.rag_enabled {
                    if let Some((index, embedder)) = rag {
                        runner = runner.with_rag(index, embedder);
                    }
                }
                let started = Instant::now();
                let record = runner.run(&task.prompt, &task.validator);
                let result = TaskResult::from_run(&task.task_id, rep, &record, started.elapsed());
                results.lock().unwrap().push(result);
            });
        }
    });
    let task_order: Vec<String> = suite.tasks.iter().map(|t| t.task_id.clone()).collect();
    let backend_order: Vec<String> = backends.iter().map(|b| b.name().to_string()).collect();
    BenchmarkReport::aggregate(
        max_attempts,
        &task_order,
        &backend_order,
        results.into_inner().unwrap(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Structured,
}

/// Render a report as a fixed-width table or as JSON.
pub fn emit_report(report: &BenchmarkReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Structured => serde_json::to_string_pretty(report).expect("report serializes"),
        ReportFormat::Table => {
            let bins: Vec<String> = (1..=report.max_attempts).map(|k| format!("@{k}")).collect();
            let mut out = String::new();
            let _ = writeln!(
                out,
                "{:<24} {:<16} {:>5} {:>9} {} {:>10} {:>10} {:>10} {:>10}",
                "task",
                "backend",
                "reps",
                "pass_rate",
                bins.iter().map(|b| format!("{b:>4}")).collect::<String>(),
                "in_tok",
                "cached_tok",
                "out_tok",
                "reason_tok"
            );
            for row in &report.rows {
                let _ = writeln!(
                    out,
                    "{:<24} {:<16} {:>5} {:>9.3} {} {:>10} {:>10} {:>10} {:>10}",
                    row.task_id,
                    row.backend_name,
                    row.repetitions,
                    row.pass_rate,
                    row.attempts_histogram
                        .iter()
                        .map(|c| format!("{c:>4}"))
                        .collect::<String>(),
                    row.token_totals.input,
                    row.token_totals.cached_input,
                    row.token_totals.output,
                    row.token_totals.reasoning
                );
            }
            out
        }
    }
}

/// Parse a structured report back.
pub fn parse_report(text: &str) -> Result<BenchmarkReport, serde_json::Error> {
    serde_json::from_str(text)
}

/// Write `report.txt`, `report.json` and one JSON line per raw result.
pub fn write_reports(report: &BenchmarkReport, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let table = dir.join("report.txt");
    let structured = dir.join("report.json");
    let raw = dir.join("results.jsonl");
    fs::write(&table, emit_report(report, ReportFormat::Table))?;
    fs::write(&structured, emit_report(report, ReportFormat::Structured))?;
    let lines: String = report
        .results
        .iter()
        .map(|r| serde_json::to_string(r).expect("result serializes") + "\n")
        .collect();
    fs::write(&raw, lines)?;
    Ok(vec![table, structured, raw])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_has_the_four_tasks() {
        let suite = Suite::default_suite();
        let ids: Vec<&str> = suite.tasks.iter().map(|t| t.task_id.as_str()).collect();
        assert_eq!(
            ids,
            ["ObservationList", "ReflectedSignificance", "ReflectedSpectrum", "Source3DAnalysis"]
        );
    }

    #[test]
    fn observation_list_is_exact_integer() {
        let suite = Suite::default_suite();
        assert!(matches!(suite.tasks[0].validator, ValidatorSpec::StdoutInt { .. }));
    }

    #[test]
    fn reflected_spectrum_is_float_pair() {
        let suite = Suite::default_suite();
        match &suite.tasks[2].validator {
            ValidatorSpec::AllOf { children } => {
                assert_eq!(children.len(), 2);
                assert!(children
                    .iter()
                    .all(|c| matches!(c, ValidatorSpec::StdoutFloat { .. })));
            }
            other => panic!("unexpected validator {other:?}"),
        }
    }

    #[test]
    fn source_3d_is_exit_code_only() {
        let suite = Suite::default_suite();
        assert_eq!(suite.tasks[3].validator, ValidatorSpec::ExitCode);
        assert!(suite.tasks[3].timeout_override_s.is_some());
    }

    #[test]
    fn duplicate_task_rejected() {
        let text = r#"
schema_version = 1
[[tasks]]
task_id = "A"
prompt = "p"
validator = { kind = "exit_code" }
[[tasks]]
task_id = "A"
prompt = "q"
validator = { kind = "exit_code" }
"#;
        assert!(matches!(Suite::from_toml(text), Err(SuiteError::DuplicateTask(_))));
    }

    #[test]
    fn schema_violation_rejected() {
        let text = "schema_version = 1\n[[tasks]]\ntask_id = \"A\"\n";
        assert!(matches!(Suite::from_toml(text), Err(SuiteError::Schema(_))));
    }

    #[test]
    fn empty_report_table_is_headers_only() {
        let report = BenchmarkReport::aggregate(3, &[], &[], vec![]);
        let table = emit_report(&report, ReportFormat::Table);
        assert_eq!(table.lines().count(), 1);
        assert!(table.starts_with("task"));
    }
}
