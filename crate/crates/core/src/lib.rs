//! Self-repairing script generation: ask a chat model for one script, run it
//! in a sandbox, check its output, and feed failures back until it passes.

pub mod chat;
pub mod config;
pub mod contracts;
pub mod dataset;
pub mod harness;
pub mod persist;
pub mod rag;
pub mod runner;
pub mod sandbox;
pub mod validate;

pub use chat::{
    connect, ChatBackend, ChatError, CompletionResult, Embedder, HashEmbedder, HttpBackend, Message, Role,
    ScriptedBackend, ScriptedReply, ScriptedRoute, TokenUsage,
};
pub use config::{load_config, save_config, BackendKind, BackendProfile, Config, ConfigError, ReasoningEffort};
pub use contracts::{
    build_repair_message, build_system_message, extract_script, lint_contracts, summarize_failure, ContractRules,
    ExtractError, FailureSummary, ScriptSource, Violation,
};
pub use harness::{emit_report, load_suite, run_benchmark, BenchmarkReport, BenchmarkTask, ReportFormat, Suite, TaskResult};
pub use rag::{build_index, query, RagIndex, RagParams, Snippet};
pub use runner::{run, AttemptRecord, RunEventKind, RunObserver, RunRecord, RunStatus, Runner};
pub use sandbox::{execute, CancelToken, ExecutionResult, Executor};
pub use validate::{validate, Check, ValidationOutcome, ValidatorSpec};
