//! Run-folder layout.
//!
//! ```text
//! <prefix>/<run_id>/
//!     run.json                 full RunRecord, rewritten after every attempt
//!     events.json              service event log (written by the service)
//!     attempt_01/
//!         script.<ext>         generated script (empty when extraction failed)
//!         transcript.json      ordered message log up to this attempt's reply
//!         stdout.txt           raw stdout (empty when not executed)
//!         stderr.txt           raw stderr (empty when not executed)
//!         outcome.json         ValidationOutcome
//! ```
//!
//! Every file is a pure function of its inputs, so re-persisting the same
//! attempt produces a byte-identical tree.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::chat::Message;
use crate::contracts::ScriptSource;
use crate::runner::RunRecord;
use crate::sandbox::{script_extension, ExecutionResult};
use crate::validate::ValidationOutcome;

pub const TRANSCRIPT_FILE: &str = "transcript.json";
pub const STDOUT_FILE: &str = "stdout.txt";
pub const STDERR_FILE: &str = "stderr.txt";
pub const OUTCOME_FILE: &str = "outcome.json";
pub const RUN_RECORD_FILE: &str = "run.json";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttemptArtifacts {
    pub script_path: PathBuf,
    pub transcript_path: PathBuf,
    pub stdout_path: PathBuf,
    pub stderr_path: PathBuf,
    pub outcome_path: PathBuf,
}

impl AttemptArtifacts {
    pub fn all(&self) -> [&Path; 5] {
        [
            &self.script_path,
            &self.transcript_path,
            &self.stdout_path,
            &self.stderr_path,
            &self.outcome_path,
        ]
    }
}

/// `20261016T093000Z-3fa9c1`: sortable UTC timestamp plus random suffix.
pub fn new_run_id() -> String {
    let suffix: u32 = rand::thread_rng().gen_range(0..0x100_0000);
    format!("{}-{suffix:06x}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"))
}

pub fn attempt_dir_name(index: u32) -> String {
    format!("attempt_{index:02}")
}

pub fn script_file_name(language_tag: &str) -> String {
    format!("script.{}", script_extension(language_tag))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    fs::write(path, bytes).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

/// Write the five artifacts of one attempt.
#[allow(clippy::too_many_arguments)]
pub fn persist_attempt(
    prefix: &Path,
    run_id: &str,
    attempt_index: u32,
    language_tag: &str,
    script: Option<&ScriptSource>,
    messages: &[Message],
    exec: Option<&ExecutionResult>,
    validation: &ValidationOutcome,
) -> Result<AttemptArtifacts, PersistError> {
    let dir = prefix.join(run_id).join(attempt_dir_name(attempt_index));
    fs::create_dir_all(&dir).map_err(|source| PersistError::Io {
        path: dir.clone(),
        source,
    })?;
    let artifacts = AttemptArtifacts {
        script_path: dir.join(script_file_name(language_tag)),
        transcript_path: dir.join(TRANSCRIPT_FILE),
        stdout_path: dir.join(STDOUT_FILE),
        stderr_path: dir.join(STDERR_FILE),
        outcome_path: dir.join(OUTCOME_FILE),
    };
    write(
        &artifacts.script_path,
        script.map(|s| s.text.as_bytes()).unwrap_or_default(),
    )?;
    write(&artifacts.transcript_path, &to_json(&messages))?;
    write(
        &artifacts.stdout_path,
        exec.map(|e| e.stdout.as_bytes()).unwrap_or_default(),
    )?;
    write(
        &artifacts.stderr_path,
        exec.map(|e| e.stderr.as_bytes()).unwrap_or_default(),
    )?;
    write(&artifacts.outcome_path, &to_json(validation))?;
    Ok(artifacts)
}

pub fn run_dir(prefix: &Path, run_id: &str) -> PathBuf {
    prefix.join(run_id)
}

pub fn write_run_record(prefix: &Path, record: &RunRecord) -> Result<PathBuf, PersistError> {
    let dir = run_dir(prefix, &record.run_id);
    fs::create_dir_all(&dir).map_err(|source| PersistError::Io {
        path: dir.clone(),
        source,
    })?;
    let path = dir.join(RUN_RECORD_FILE);
    write(&path, &to_json(record))?;
    Ok(path)
}

pub fn read_run_record(path: &Path) -> Result<RunRecord, PersistError> {
    let text = fs::read_to_string(path).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| PersistError::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Every readable run record under `prefix`, ordered by run id.
pub fn scan_runs(prefix: &Path) -> Vec<RunRecord> {
    let Ok(entries) = fs::read_dir(prefix) else {
        return Vec::new();
    };
    let mut runs: Vec<RunRecord> = entries
        .filter_map(Result::ok)
        .map(|e| e.path().join(RUN_RECORD_FILE))
        .filter(|p| p.is_file())
        .filter_map(|p| match read_run_record(&p) {
            Ok(r) => Some(r),
            Err(e) => {
                tracing::warn!(error = %e, "skipping unreadable run record");
                None
            }
        })
        .collect();
    runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    runs
}
