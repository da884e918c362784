mod common;

use std::sync::{Arc, Mutex};

use common::*;
use scriptloop::chat::{ChatError, CompletionResult, Embedder, HashEmbedder, Role};
use scriptloop::rag::{build_index, RagParams};
use scriptloop::runner::{RunEventKind, RunObserver, CLASS_CONTRACT_VIOLATION};
use scriptloop::{
    ChatBackend, ContractRules, Message, RunStatus, Runner, ScriptedBackend, ScriptedReply, ScriptedRoute,
    TokenUsage, ValidatorSpec,
};

fn usage(i: u32) -> TokenUsage {
    TokenUsage::new(100 * i as u64, 10 * i as u64, 50 * i as u64, 20 * i as u64)
}

#[test]
fn passes_on_first_attempt() {
    let data = tempfile::tempdir().unwrap();
    let cfg = offline_config(data.path());
    let rec = Runner::new(&cfg, fail_then_pass(1, usage)).run("count", &n_obs_validator());
    assert_eq!(rec.status, RunStatus::Success);
    assert_eq!(rec.attempts_to_pass(), Some(1));
    assert_eq!(rec.attempts.len(), 1);
    assert!(rec.attempts[0].repair_message.is_none());
}

#[test]
fn import_error_then_pass_sends_one_repair_with_class_and_hint() {
    let data = tempfile::tempdir().unwrap();
    let cfg = offline_config(data.path());
    let rec = Runner::new(&cfg, fail_then_pass(2, usage)).run("count", &n_obs_validator());
    assert_eq!(rec.status, RunStatus::Success);
    assert_eq!(rec.attempts_to_pass(), Some(2));
    let first = &rec.attempts[0];
    assert_eq!(first.failure.as_ref().unwrap().exception_class, "ModuleNotFoundError");
    let repair = first.repair_message.as_ref().unwrap().content();
    assert!(repair.contains("ModuleNotFoundError"));
    assert!(repair.contains("nonexistent_module_xyz"));
    assert!(repair.contains("Import all requirements"));
    let users = rec.messages.iter().filter(|m| m.role() == Role::User).count();
    assert_eq!(users, 2, "prompt plus exactly one repair turn");
    // failing script stays in the history verbatim
    assert!(rec.messages[2].content().contains(FAIL_SCRIPT));
}

#[test]
fn budget_exhausted_sends_no_repair_after_last_attempt() {
    let data = tempfile::tempdir().unwrap();
    let cfg = offline_config(data.path());
    let backend: Arc<dyn ChatBackend> =
        Arc::new(ScriptedBackend::sequence("s", vec![ScriptedReply::new(fenced(FAIL_SCRIPT))]));
    let rec = Runner::new(&cfg, backend)
        .with_max_attempts(3)
        .run("count", &n_obs_validator());
    assert_eq!(rec.status, RunStatus::BudgetExhausted);
    assert_eq!(rec.attempts.len(), 3);
    assert!(rec.attempts_to_pass().is_none());
    let repairs: Vec<bool> = rec.attempts.iter().map(|a| a.repair_message.is_some()).collect();
    assert_eq!(repairs, [true, true, false]);
    assert_eq!(rec.messages.len(), 2 + 3 + 2);
}

#[test]
fn timeout_attempt_is_classified() {
    let data = tempfile::tempdir().unwrap();
    let mut cfg = offline_config(data.path());
    cfg.policy.exec_timeout_s = 0.5;
    let backend: Arc<dyn ChatBackend> = Arc::new(ScriptedBackend::sequence(
        "s",
        vec![
            ScriptedReply::new(fenced("import time\ntime.sleep(30)")),
            ScriptedReply::new(fenced(PASS_SCRIPT)),
        ],
    ));
    let rec = Runner::new(&cfg, backend).run("count", &n_obs_validator());
    assert_eq!(rec.attempts[0].failure.as_ref().unwrap().exception_class, "Timeout");
    assert!(rec.attempts[0].exec.as_ref().unwrap().timed_out);
    assert_eq!(rec.attempts_to_pass(), Some(2));
}

#[test]
fn contract_violation_blocks_execution() {
    let data = tempfile::tempdir().unwrap();
    let cfg = offline_config(data.path());
    let backend: Arc<dyn ChatBackend> = Arc::new(ScriptedBackend::sequence(
        "s",
        vec![
            ScriptedReply::new(fenced("import matplotlib.pyplot as plt\nprint('N_OBS=4')\nplt.show()")),
            ScriptedReply::new(fenced(PASS_SCRIPT)),
        ],
    ));
    let rec = Runner::new(&cfg, backend).run("count", &n_obs_validator());
    let first = &rec.attempts[0];
    assert!(first.exec.is_none(), "violating script must not run");
    assert_eq!(first.lint.len(), 1);
    assert_eq!(first.lint[0].line, 3);
    assert_eq!(first.failure.as_ref().unwrap().exception_class, CLASS_CONTRACT_VIOLATION);
    assert!(first.repair_message.as_ref().unwrap().content().contains("no-display-plot"));
    assert_eq!(rec.status, RunStatus::Success);
}

#[test]
fn multiple_blocks_never_execute() {
    let data = tempfile::tempdir().unwrap();
    let cfg = offline_config(data.path());
    let two = format!("{}\n{}", fenced("print('N_OBS=4')"), fenced("print(2)"));
    let backend: Arc<dyn ChatBackend> = Arc::new(ScriptedBackend::sequence("s", vec![ScriptedReply::new(two)]));
    let rec = Runner::new(&cfg, backend).with_max_attempts(2).run("count", &n_obs_validator());
    assert!(rec.attempts.iter().all(|a| a.exec.is_none() && a.script.is_none()));
    assert_eq!(rec.attempts[0].failure.as_ref().unwrap().exception_class, "MultipleCodeBlocks");
    assert_eq!(rec.status, RunStatus::BudgetExhausted);
}

#[test]
fn clean_exit_with_wrong_value_reports_expected_and_observed() {
    let data = tempfile::tempdir().unwrap();
    let cfg = offline_config(data.path());
    let backend: Arc<dyn ChatBackend> =
        Arc::new(ScriptedBackend::sequence("s", vec![ScriptedReply::new(fenced("print('N_OBS=3')"))]));
    let rec = Runner::new(&cfg, backend).with_max_attempts(2).run("count", &n_obs_validator());
    let repair = rec.attempts[0].repair_message.as_ref().unwrap().content().to_string();
    assert!(repair.contains("expected 4"));
    assert!(repair.contains("observed 3"));
}

struct Failing;

impl Embedder for Failing {
    fn identity(&self) -> String {
        "failing".into()
    }
    fn embed(&self, _: &[String]) -> Result<Vec<Vec<f64>>, ChatError> {
        Err(ChatError::Transport("down".into()))
    }
}

impl ChatBackend for Failing {
    fn name(&self) -> &str {
        "failing"
    }
    fn complete(&self, _: &[Message], _: bool) -> Result<CompletionResult, ChatError> {
        Err(ChatError::Http {
            status: 401,
            body: "bad key".into(),
        })
    }
}

#[test]
fn backend_error_stops_without_attempts() {
    let data = tempfile::tempdir().unwrap();
    let cfg = offline_config(data.path());
    let rec = Runner::new(&cfg, Arc::new(Failing)).run("count", &n_obs_validator());
    assert_eq!(rec.status, RunStatus::BackendError);
    assert!(rec.attempts.is_empty());
    assert!(rec.error.as_ref().unwrap().contains("401"));
}

#[test]
fn missing_data_root_is_executor_error_attempt() {
    let cfg = offline_config(std::path::Path::new("/nonexistent/data/root"));
    let rec = Runner::new(&cfg, fail_then_pass(1, usage))
        .with_max_attempts(1)
        .run("count", &n_obs_validator());
    assert_eq!(rec.status, RunStatus::BudgetExhausted);
    assert_eq!(rec.attempts[0].failure.as_ref().unwrap().exception_class, "ExecutorError");
}

#[test]
fn total_usage_is_sum_of_attempts() {
    let data = tempfile::tempdir().unwrap();
    let cfg = offline_config(data.path());
    let rec = Runner::new(&cfg, fail_then_pass(3, usage)).run("count", &n_obs_validator());
    let sum: TokenUsage = rec.attempts.iter().map(|a| a.usage).sum();
    assert_eq!(rec.total_usage, sum);
    assert_eq!(rec.total_usage, usage(1) + usage(2) + usage(3));
}

#[derive(Default)]
struct Recorder(Mutex<Vec<RunEventKind>>);

impl RunObserver for Recorder {
    fn on_event(&self, kind: RunEventKind, _: serde_json::Value) {
        self.0.lock().unwrap().push(kind);
    }
}

#[test]
fn events_follow_attempt_order() {
    use RunEventKind::*;
    let data = tempfile::tempdir().unwrap();
    let cfg = offline_config(data.path());
    let rec = Recorder::default();
    Runner::new(&cfg, fail_then_pass(2, usage))
        .with_observer(&rec)
        .run("count", &n_obs_validator());
    assert_eq!(
        *rec.0.lock().unwrap(),
        [
            AttemptStarted,
            ScriptReady,
            ExecutionFinished,
            ValidationFinished,
            RepairComposed,
            AttemptStarted,
            ScriptReady,
            ExecutionFinished,
            ValidationFinished,
            RunFinished
        ]
    );
}

#[test]
fn cancellation_before_start_records_no_attempt() {
    let data = tempfile::tempdir().unwrap();
    let cfg = offline_config(data.path());
    let token = scriptloop::CancelToken::new();
    token.cancel();
    let rec = Runner::new(&cfg, fail_then_pass(1, usage))
        .with_cancel(token)
        .run("count", &n_obs_validator());
    assert!(rec.cancelled);
    assert!(rec.attempts.is_empty());
    assert_eq!(rec.status, RunStatus::BudgetExhausted);
}

#[test]
fn cancellation_mid_execution_kills_and_stops() {
    let data = tempfile::tempdir().unwrap();
    let cfg = offline_config(data.path());
    let token = scriptloop::CancelToken::new();
    let backend: Arc<dyn ChatBackend> = Arc::new(ScriptedBackend::sequence(
        "s",
        vec![ScriptedReply::new(fenced("import time\ntime.sleep(30)"))],
    ));
    let t = token.clone();
    let canceller = std::thread::spawn(move || {
        std::thread::sleep(std::time::Duration::from_millis(500));
        t.cancel();
    });
    let started = std::time::Instant::now();
    let rec = Runner::new(&cfg, backend).with_cancel(token).run("count", &n_obs_validator());
    canceller.join().unwrap();
    assert!(started.elapsed().as_secs() < 5);
    assert!(rec.cancelled);
    assert_eq!(rec.attempts.len(), 1);
    assert!(rec.attempts[0].exec.as_ref().unwrap().cancelled);
    assert!(rec.attempts[0].repair_message.is_none());
}

#[test]
fn rag_context_precedes_the_prompt() {
    let data = tempfile::tempdir().unwrap();
    let mut cfg = offline_config(data.path());
    cfg.rag.score_threshold = -1.0;
    let embedder = HashEmbedder::new(64);
    let sources = vec![(
        "obs_tutorial".to_string(),
        "from gammapy.data import DataStore\ndata_store = DataStore.from_dir(path)\n".to_string(),
    )];
    let index = build_index(&sources, &RagParams::default(), &ContractRules::default(), &embedder).unwrap();
    let rec = Runner::new(&cfg, fail_then_pass(1, usage))
        .with_rag(&index, &embedder)
        .run("count observations in the data store", &n_obs_validator());
    assert_eq!(rec.rag_context.len(), 1);
    assert_eq!(rec.messages[1].role(), Role::User);
    assert!(rec.messages[1].content().contains("DataStore.from_dir"));
    assert_eq!(rec.messages[2].content(), "count observations in the data store");
}

#[test]
fn failing_retrieval_degrades_to_no_context() {
    let data = tempfile::tempdir().unwrap();
    let cfg = offline_config(data.path());
    let index = build_index(
        &[("a".to_string(), "some text".to_string())],
        &RagParams::default(),
        &ContractRules::default(),
        &HashEmbedder::new(8),
    )
    .unwrap();
    let rec = Runner::new(&cfg, fail_then_pass(1, usage))
        .with_rag(&index, &Failing)
        .run("count", &n_obs_validator());
    assert_eq!(rec.status, RunStatus::Success);
    assert!(rec.rag_context.is_empty());
    assert_eq!(rec.messages.len(), 3);
    assert!(rec.error.as_ref().unwrap().contains("retrieval failed"));
}

#[test]
fn routes_select_by_prompt() {
    let data = tempfile::tempdir().unwrap();
    let cfg = offline_config(data.path());
    let backend: Arc<dyn ChatBackend> = Arc::new(ScriptedBackend::new(
        "s",
        vec![
            ScriptedRoute {
                when_prompt_contains: Some("flux".into()),
                replies: vec![ScriptedReply::new(fenced("print('FLUX=1.5')"))],
            },
            ScriptedRoute {
                when_prompt_contains: None,
                replies: vec![ScriptedReply::new(fenced(PASS_SCRIPT))],
            },
        ],
    ));
    let rec = Runner::new(&cfg, backend.clone()).run("report the flux", &ValidatorSpec::stdout_float("FLUX", 1.5, 0.0, 0.0));
    assert_eq!(rec.status, RunStatus::Success);
    let rec = Runner::new(&cfg, backend).run("count", &n_obs_validator());
    assert_eq!(rec.status, RunStatus::Success);
}

#[test]
fn persisted_tree_has_one_folder_per_attempt() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = offline_config(data.path());
    let rec = Runner::new(&cfg, fail_then_pass(2, usage))
        .with_persistence(Some(out.path().to_path_buf()))
        .with_run_id("fixed")
        .run("count", &n_obs_validator());
    let run = out.path().join("fixed");
    assert!(run.join("run.json").is_file());
    assert!(run.join("attempt_01/script.py").is_file());
    assert!(run.join("attempt_02/outcome.json").is_file());
    let back = scriptloop::persist::read_run_record(&run.join("run.json")).unwrap();
    assert_eq!(back, rec);
}
