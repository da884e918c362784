//! The generate → lint → execute → validate → repair loop.
//!
//! A run never returns an error: every terminal condition (success, budget
//! exhausted, backend failure, cancellation) is a status inside the
//! [`RunRecord`]. Extraction and lint failures consume an attempt because
//! they consumed a model call.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::chat::{ChatBackend, Embedder, Message, TokenUsage};
use crate::config::{resolve_child_env, Config};
use crate::contracts::{
    build_repair_message, build_system_message, extract_script, lint_contracts, summarize_failure,
    FailureSummary, ScriptSource, Violation,
};
use crate::persist;
use crate::rag::{self, RagIndex};
use crate::sandbox::{CancelToken, ExecutionResult, Executor};
use crate::validate::{validate, ValidationOutcome, ValidatorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    BudgetExhausted,
    BackendError,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Success => "success",
            RunStatus::BudgetExhausted => "budget_exhausted",
            RunStatus::BackendError => "backend_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    /// 1-based.
    pub index: u32,
    /// Raw model reply.
    pub completion: String,
    /// Absent when extraction failed.
    pub script: Option<ScriptSource>,
    pub lint: Vec<Violation>,
    /// Absent when extraction or lint blocked execution.
    pub exec: Option<ExecutionResult>,
    pub validation: ValidationOutcome,
    pub usage: TokenUsage,
    /// Exception class and tail for failed attempts.
    pub failure: Option<FailureSummary>,
    pub repair_message: Option<Message>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetRef {
    pub source_id: String,
    pub ordinal: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub backend: String,
    pub prompt: String,
    pub validator: ValidatorSpec,
    pub rag_context: Vec<SnippetRef>,
    pub messages: Vec<Message>,
    pub attempts: Vec<AttemptRecord>,
    pub status: RunStatus,
    pub total_usage: TokenUsage,
    #[serde(default)]
    pub cancelled: bool,
    /// Backend or persistence error text, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    /// Index of the first passing attempt.
    pub fn attempts_to_pass(&self) -> Option<u32> {
        self.attempts
            .iter()
            .find(|a| a.validation.passed)
            .map(|a| a.index)
    }

    pub fn final_script(&self) -> Option<&ScriptSource> {
        self.attempts.last().and_then(|a| a.script.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunEventKind {
    AttemptStarted,
    ScriptReady,
    ExecutionFinished,
    ValidationFinished,
    RepairComposed,
    RunFinished,
}

/// Receives attempt-level progress. Called on the run's thread.
pub trait RunObserver: Send + Sync {
    fn on_event(&self, kind: RunEventKind, payload: Value);
}

/// Exception class used when the contracts linter blocked execution.
pub const CLASS_CONTRACT_VIOLATION: &str = "ContractViolation";
/// Exception class used when the script ran cleanly but failed a check.
pub const CLASS_VALIDATION_FAILED: &str = "ValidationFailed";
/// Exception class used when the executor itself could not run the script.
pub const CLASS_EXECUTOR_ERROR: &str = "ExecutorError";

pub struct Runner<'a> {
    config: &'a Config,
    backend: Arc<dyn ChatBackend>,
    rag: Option<(&'a RagIndex, &'a dyn Embedder)>,
    observer: Option<&'a dyn RunObserver>,
    cancel: CancelToken,
    run_id: Option<String>,
    parent_env: BTreeMap<String, String>,
    max_attempts: u32,
    exec_timeout: Duration,
    prefix: Option<PathBuf>,
}

impl<'a> Runner<'a> {
    pub fn new(config: &'a Config, backend: Arc<dyn ChatBackend>) -> Self {
        let prefix = config
            .policy
            .persist
            .then(|| config.policy.prefix_dir.clone())
            .flatten();
        Self {
            config,
            backend,
            rag: None,
            observer: None,
            cancel: CancelToken::new(),
            run_id: None,
            parent_env: std::env::vars().collect(),
            max_attempts: config.policy.max_attempts,
            exec_timeout: Duration::from_secs_f64(config.policy.exec_timeout_s),
            prefix,
        }
    }

    pub fn with_rag(mut self, index: &'a RagIndex, embedder: &'a dyn Embedder) -> Self {
        self.rag = Some((index, embedder));
        self
    }

    pub fn with_observer(mut self, observer: &'a dyn RunObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn with_cancel(mut self, token: CancelToken) -> Self {
        self.cancel = token;
        self
    }

    pub fn with_run_id(mut self, run_id: impl Into<String>) -> Self {
        self.run_id = Some(run_id.into());
        self
    }

    pub fn with_parent_env(mut self, env: BTreeMap<String, String>) -> Self {
        self.parent_env = env;
        self
    }

    pub fn with_max_attempts(mut self, max_attempts: u32) -> Self {
        self.max_attempts = max_attempts.max(1);
        self
    }

    pub fn with_exec_timeout(mut self, timeout: Duration) -> Self {
        self.exec_timeout = timeout;
        self
    }

    /// Persist under `prefix` regardless of the policy (or not at all).
    pub fn with_persistence(mut self, prefix: Option<PathBuf>) -> Self {
        self.prefix = prefix;
        self
    }

    fn emit(&self, kind: RunEventKind, payload: Value) {
        if let Some(o) = self.observer {
            o.on_event(kind, payload);
        }
    }

    fn initial_messages(&self, prompt: &str) -> (Vec<Message>, Vec<SnippetRef>, Option<String>) {
        let mut messages = vec![build_system_message(&self.config.contracts)];
        let mut refs = Vec::new();
        let mut warning = None;
        if let Some((index, embedder)) = self.rag {
            match rag::query(index, prompt, &self.config.rag, embedder) {
                Ok(snippets) if !snippets.is_empty() => {
                    messages.push(Message::user(rag::render_context(&snippets)));
                    refs = snippets
                        .iter()
                        .map(|s| SnippetRef {
                            source_id: s.source_id.clone(),
                            ordinal: s.ordinal,
                            score: s.score,
                        })
                        .collect();
                }
                Ok(_) => {}
                Err(e) => {
                    tracing::warn!(error = %e, "retrieval failed; continuing without context");
                    warning = Some(format!("retrieval failed: {e}"));
                }
            }
        }
        messages.push(Message::user(prompt));
        (messages, refs, warning)
    }

    fn execute(&self, script: &ScriptSource) -> Result<ExecutionResult, String> {
        let env_spec = &self.config.env;
        if !env_spec.data_root.is_dir() {
            return Err(format!(
                "data root {} is not a directory",
                env_spec.data_root.display()
            ));
        }
        let mut env_spec = env_spec.clone();
        if let Ok(abs) = env_spec.data_root.canonicalize() {
            env_spec.data_root = abs;
        }
        let env = resolve_child_env(&env_spec, &self.parent_env);
        let workdir = tempfile::Builder::new()
            .prefix("scriptloop-")
            .tempdir()
            .map_err(|e| format!("cannot create workdir: {e}"))?;
        Executor::new(self.config.policy.interpreter.clone(), self.exec_timeout)
            .with_network(env_spec.network_allowed)
            .execute(script, &env, workdir.path(), Some(&self.cancel))
            .map_err(|e| e.to_string())
    }

    /// Drive one run to a terminal status.
    pub fn run(&self, prompt: &str, validator: &ValidatorSpec) -> RunRecord {
        let rules = &self.config.contracts;
        let (mut messages, rag_context, rag_warning) = self.initial_messages(prompt);
        let mut record = RunRecord {
            run_id: self.run_id.clone().unwrap_or_else(persist::new_run_id),
            backend: self.backend.name().to_string(),
            prompt: prompt.to_string(),
            validator: validator.clone(),
            rag_context,
            messages: Vec::new(),
            attempts: Vec::new(),
            status: RunStatus::BudgetExhausted,
            total_usage: TokenUsage::default(),
            cancelled: false,
            error: rag_warning,
        };

        for index in 1..=self.max_attempts {
            if self.cancel.is_cancelled() {
                record.cancelled = true;
                break;
            }
            self.emit(RunEventKind::AttemptStarted, json!({"attempt": index}));

            let completion = match self.backend.complete(&messages, true) {
                Ok(c) => c,
                Err(e) => {
                    record.status = RunStatus::BackendError;
                    record.error = Some(e.to_string());
                    break;
                }
            };
            messages.push(Message::assistant(completion.text.clone()));

            let mut attempt = AttemptRecord {
                index,
                completion: completion.text.clone(),
                script: None,
                lint: Vec::new(),
                exec: None,
                validation: ValidationOutcome::failed("pending", "", ""),
                usage: completion.usage,
                failure: None,
                repair_message: None,
            };

            match extract_script(&completion.text, &rules.language) {
                Err(e) => {
                    attempt.validation = ValidationOutcome::failed(
                        "extract_script",
                        &format!("exactly one {} code block", rules.language),
                        &e.to_string(),
                    );
                    attempt.failure = Some(FailureSummary::new(e.class(), e.to_string()));
                }
                Ok(script) => {
                    self.emit(
                        RunEventKind::ScriptReady,
                        json!({"attempt": index, "script": script.text, "content_hash": script.content_hash}),
                    );
                    attempt.lint = lint_contracts(&script, rules);
                    if !attempt.lint.is_empty() {
                        attempt.validation = ValidationOutcome::failed(
                            "contract_lint",
                            "no violations",
                            &format!("{} violation(s)", attempt.lint.len()),
                        );
                        attempt.failure = Some(FailureSummary::new(CLASS_CONTRACT_VIOLATION, ""));
                    } else {
                        match self.execute(&script) {
                            Ok(exec) => {
                                self.emit(
                                    RunEventKind::ExecutionFinished,
                                    json!({
                                        "attempt": index,
                                        "exit_code": exec.exit_code,
                                        "timed_out": exec.timed_out,
                                        "cancelled": exec.cancelled,
                                        "duration_ms": exec.duration_ms,
                                        "stdout": exec.stdout,
                                        "stderr": exec.stderr,
                                    }),
                                );
                                attempt.validation = validate(validator, &exec);
                                if !attempt.validation.passed {
                                    attempt.failure = Some(if exec.succeeded() {
                                        checks_summary(&attempt.validation)
                                    } else {
                                        summarize_failure(&exec, rules.tail_lines)
                                    });
                                }
                                attempt.exec = Some(exec);
                            }
                            Err(reason) => {
                                attempt.validation =
                                    ValidationOutcome::failed("execution", "script executed", &reason);
                                attempt.failure = Some(FailureSummary::new(CLASS_EXECUTOR_ERROR, reason));
                            }
                        }
                    }
                    attempt.script = Some(script);
                }
            }
            self.emit(
                RunEventKind::ValidationFinished,
                json!({"attempt": index, "passed": attempt.validation.passed, "checks": attempt.validation.checks}),
            );

            let passed = attempt.validation.passed;
            let cancelled = self.cancel.is_cancelled()
                || attempt.exec.as_ref().is_some_and(|e| e.cancelled);
            if !passed && !cancelled && index < self.max_attempts {
                let repair = self.compose_repair(&attempt);
                messages.push(repair.clone());
                self.emit(
                    RunEventKind::RepairComposed,
                    json!({"attempt": index, "message": repair.content()}),
                );
                attempt.repair_message = Some(repair);
            }

            record.total_usage += attempt.usage;
            if let Some(prefix) = &self.prefix {
                if let Err(e) = persist::persist_attempt(
                    prefix,
                    &record.run_id,
                    index,
                    &rules.language,
                    attempt.script.as_ref(),
                    &messages,
                    attempt.exec.as_ref(),
                    &attempt.validation,
                ) {
                    tracing::error!(error = %e, "attempt persistence failed");
                    record.error = Some(e.to_string());
                }
            }
            record.attempts.push(attempt);
            record.messages = messages.clone();
            self.persist_record(&record);

            if passed {
                record.status = RunStatus::Success;
                break;
            }
            if cancelled {
                record.cancelled = true;
                break;
            }
        }

        record.messages = messages;
        self.persist_record(&record);
        self.emit(
            RunEventKind::RunFinished,
            json!({
                "status": record.status,
                "cancelled": record.cancelled,
                "attempts": record.attempts.len(),
                "attempts_to_pass": record.attempts_to_pass(),
                "total_usage": record.total_usage,
                "error": record.error,
            }),
        );
        record
    }

    fn compose_repair(&self, attempt: &AttemptRecord) -> Message {
        let rules = &self.config.contracts;
        let summary = attempt
            .failure
            .as_ref()
            .filter(|f| f.exception_class != CLASS_CONTRACT_VIOLATION);
        let class = attempt
            .failure
            .as_ref()
            .map(|f| f.exception_class.as_str())
            .unwrap_or("Unknown");
        let hints = rules.hints_for(class);
        let fallback;
        let summary = match (summary, attempt.lint.is_empty()) {
            (Some(s), _) => Some(s),
            (None, false) => None,
            (None, true) => {
                fallback = FailureSummary::new(class, "");
                Some(&fallback)
            }
        };
        build_repair_message(summary, &attempt.lint, &hints)
            .expect("summary or violations present for a failed attempt")
    }

    fn persist_record(&self, record: &RunRecord) {
        if let Some(prefix) = &self.prefix {
            if let Err(e) = persist::write_run_record(prefix, record) {
                tracing::error!(error = %e, "run record persistence failed");
            }
        }
    }
}

/// Summary for a clean exit whose domain checks failed: the failing checks
/// with expected and observed values stand in for a traceback.
fn checks_summary(outcome: &ValidationOutcome) -> FailureSummary {
    let tail = outcome
        .failing_checks()
        .map(|c| format!("check {}: expected {}, observed {}", c.name, c.expected, c.observed))
        .collect::<Vec<_>>()
        .join("\n");
    FailureSummary::new(CLASS_VALIDATION_FAILED, tail)
}

/// Run a prompt with the default backend of `config`.
pub fn run(
    prompt: &str,
    config: &Config,
    backend: Arc<dyn ChatBackend>,
    validator: &ValidatorSpec,
    rag: Option<(&RagIndex, &dyn Embedder)>,
) -> RunRecord {
    let mut runner = Runner::new(config, backend);
    if let Some((index, embedder)) = rag {
        runner = runner.with_rag(index, embedder);
    }
    runner.run(prompt, validator)
}
