//! Runtime configuration: backends, run policy, child environment, RAG and
//! contract settings.
//!
//! The on-disk format is a single TOML document carrying a
//! `schema_version` integer. Credentials are never part of it; each backend
//! names the environment variable that holds its key.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::contracts::ContractRules;
use crate::rag::RagParams;

/// Current configuration schema version.
pub const SCHEMA_VERSION: u32 = 1;

/// Variable through which the data root is published to generated scripts.
pub const DEFAULT_PUBLISHED_VAR: &str = "PHOTON_STORAGE";

/// Legacy data variable still referenced by tutorials.
pub const LEGACY_DATA_VAR: &str = "GAMMAPY_DATA";

pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;
pub const DEFAULT_EXEC_TIMEOUT_S: f64 = 300.0;
pub const DEFAULT_REQUEST_TIMEOUT_S: f64 = 120.0;
pub const DEFAULT_EFFORT_FIELD: &str = "reasoning_effort";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    Missing(PathBuf),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Unwritable {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("invalid field `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error("duplicate backend name `{0}`")]
    DuplicateBackend(String),
    #[error("default_backend `{0}` names no configured backend")]
    DanglingDefault(String),
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Version(u32),
}

fn field_err(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningEffort {
    Low,
    Medium,
    High,
}

impl ReasoningEffort {
    pub fn as_str(self) -> &'static str {
        match self {
            ReasoningEffort::Low => "low",
            ReasoningEffort::Medium => "medium",
            ReasoningEffort::High => "high",
        }
    }
}

impl fmt::Display for ReasoningEffort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a backend is reached.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Any server speaking the chat-completions HTTP format.
    #[default]
    OpenaiCompatible,
    /// In-process replay of a scripted reply file; used for offline runs.
    Scripted,
}

/// One model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendProfile {
    pub name: String,
    #[serde(default)]
    pub kind: BackendKind,
    pub base_url: Url,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    pub model_id: String,
    #[serde(default)]
    pub embedding_model_id: String,
    #[serde(default = "default_effort")]
    pub reasoning_effort: ReasoningEffort,
    #[serde(default = "default_request_timeout")]
    pub request_timeout_s: f64,
    /// Request field carrying the reasoning effort; dotted paths nest
    /// (`reasoning.effort`).
    #[serde(default = "default_effort_field")]
    pub effort_field: String,
    /// Reply schedule for `kind = "scripted"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_file: Option<PathBuf>,
}

fn default_effort() -> ReasoningEffort {
    ReasoningEffort::High
}
fn default_request_timeout() -> f64 {
    DEFAULT_REQUEST_TIMEOUT_S
}
fn default_effort_field() -> String {
    DEFAULT_EFFORT_FIELD.to_string()
}

impl BackendProfile {
    /// A profile for an OpenAI-compatible endpoint with default knobs.
    pub fn openai_compatible(name: &str, base_url: &str, model_id: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: BackendKind::OpenaiCompatible,
            base_url: Url::parse(base_url).expect("valid base url"),
            api_key_env: None,
            model_id: model_id.to_string(),
            embedding_model_id: String::new(),
            reasoning_effort: default_effort(),
            request_timeout_s: DEFAULT_REQUEST_TIMEOUT_S,
            effort_field: default_effort_field(),
            script_file: None,
        }
    }

    /// A scripted profile replaying the given reply file.
    pub fn scripted(name: &str, script_file: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Scripted,
            script_file: Some(script_file.into()),
            ..Self::openai_compatible(name, "scripted://local", "scripted")
        }
    }

    fn check(&self, idx: usize) -> Result<(), ConfigError> {
        let at = |f: &str| format!("backends[{idx}].{f}");
        if self.name.trim().is_empty() {
            return Err(field_err(at("name"), "must not be empty"));
        }
        if self.base_url.cannot_be_a_base() {
            return Err(field_err(at("base_url"), "must be an absolute URL"));
        }
        if !(self.request_timeout_s > 0.0 && self.request_timeout_s.is_finite()) {
            return Err(field_err(at("request_timeout_s"), "must be > 0"));
        }
        if self.effort_field.is_empty() || self.effort_field.split('.').any(str::is_empty) {
            return Err(field_err(at("effort_field"), "must be a non-empty dotted path"));
        }
        if self.kind == BackendKind::Scripted && self.script_file.is_none() {
            return Err(field_err(at("script_file"), "required for scripted backends"));
        }
        Ok(())
    }
}

/// Governance of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPolicy {
    pub max_attempts: u32,
    pub exec_timeout_s: f64,
    pub persist: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prefix_dir: Option<PathBuf>,
    /// Command template for the script interpreter; `{script}` is replaced
    /// with the script path (appended when absent).
    pub interpreter: Vec<String>,
}

impl Default for RunPolicy {
    fn default() -> Self {
        Self {
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            exec_timeout_s: DEFAULT_EXEC_TIMEOUT_S,
            persist: false,
            prefix_dir: None,
            interpreter: vec!["python3".into(), "{script}".into()],
        }
    }
}

impl RunPolicy {
    pub fn check(&self) -> Result<(), ConfigError> {
        if self.max_attempts < 1 {
            return Err(field_err("policy.max_attempts", "must be >= 1"));
        }
        if !(self.exec_timeout_s > 0.0 && self.exec_timeout_s.is_finite()) {
            return Err(field_err("policy.exec_timeout_s", "must be > 0"));
        }
        if self.persist && self.prefix_dir.is_none() {
            return Err(field_err("policy.prefix_dir", "required when persist = true"));
        }
        if self.interpreter.is_empty() || self.interpreter[0].is_empty() {
            return Err(field_err("policy.interpreter", "must name a program"));
        }
        Ok(())
    }
}

/// What the child process is allowed to see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSpec {
    pub data_root: PathBuf,
    pub published_var: String,
    pub passthrough_vars: Vec<String>,
    pub network_allowed: bool,
    /// Also publish the data root as `GAMMAPY_DATA`.
    pub also_publish_legacy: bool,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            published_var: DEFAULT_PUBLISHED_VAR.to_string(),
            passthrough_vars: Vec::new(),
            network_allowed: false,
            also_publish_legacy: false,
        }
    }
}

impl EnvSpec {
    fn check(&self) -> Result<(), ConfigError> {
        let valid_name = |s: &str| {
            !s.is_empty() && !s.contains('=') && !s.contains('\0')
        };
        if !valid_name(&self.published_var) {
            return Err(field_err("env.published_var", "not a valid variable name"));
        }
        if let Some(bad) = self.passthrough_vars.iter().find(|v| !valid_name(v)) {
            return Err(field_err(
                "env.passthrough_vars",
                format!("`{bad}` is not a valid variable name"),
            ));
        }
        Ok(())
    }

    /// Names under which the data root is published to the child.
    pub fn published_names(&self) -> Vec<&str> {
        let mut names = vec![self.published_var.as_str()];
        if self.also_publish_legacy && self.published_var != LEGACY_DATA_VAR {
            names.push(LEGACY_DATA_VAR);
        }
        names
    }
}

/// Settings for the HTTP service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceParams {
    pub bind: String,
    pub max_concurrent_runs: usize,
    pub max_attempts_ceiling: u32,
    /// Environment variable holding an optional bearer token.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
}

impl Default for ServiceParams {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8765".into(),
            max_concurrent_runs: 2,
            max_attempts_ceiling: 10,
            auth_token_env: None,
        }
    }
}

/// Settings for the benchmark harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchParams {
    pub parallelism: usize,
    pub results_dir: PathBuf,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            parallelism: 2,
            results_dir: PathBuf::from("bench-results"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub default_backend: String,
    pub backends: Vec<BackendProfile>,
    #[serde(default)]
    pub policy: RunPolicy,
    #[serde(default)]
    pub env: EnvSpec,
    #[serde(default)]
    pub rag: RagParams,
    #[serde(default)]
    pub contracts: ContractRules,
    #[serde(default)]
    pub service: ServiceParams,
    #[serde(default)]
    pub bench: BenchParams,
}

impl Default for Config {
    fn default() -> Self {
        let mut openai = BackendProfile::openai_compatible(
            "openai",
            "https://api.openai.com/v1",
            "gpt-5",
        );
        openai.api_key_env = Some("OPENAI_API_KEY".into());
        openai.embedding_model_id = "text-embedding-3-small".into();
        Self {
            schema_version: SCHEMA_VERSION,
            default_backend: openai.name.clone(),
            backends: vec![openai],
            policy: RunPolicy::default(),
            env: EnvSpec::default(),
            rag: RagParams::default(),
            contracts: ContractRules::default(),
            service: ServiceParams::default(),
            bench: BenchParams::default(),
        }
    }
}

impl Config {
    /// Enforce every cross-field invariant.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Version(self.schema_version));
        }
        let mut seen = BTreeSet::new();
        for (i, b) in self.backends.iter().enumerate() {
            b.check(i)?;
            if !seen.insert(b.name.as_str()) {
                return Err(ConfigError::DuplicateBackend(b.name.clone()));
            }
        }
        if !seen.contains(self.default_backend.as_str()) {
            return Err(ConfigError::DanglingDefault(self.default_backend.clone()));
        }
        self.policy.check()?;
        self.env.check()?;
        self.rag.check().map_err(|reason| field_err("rag", reason))?;
        self.contracts
            .check(&self.env)
            .map_err(|reason| field_err("contracts", reason))?;
        if self.service.max_concurrent_runs == 0 {
            return Err(field_err("service.max_concurrent_runs", "must be >= 1"));
        }
        if self.service.max_attempts_ceiling == 0 {
            return Err(field_err("service.max_attempts_ceiling", "must be >= 1"));
        }
        if self.bench.parallelism == 0 {
            return Err(field_err("bench.parallelism", "must be >= 1"));
        }
        Ok(())
    }

    pub fn backend(&self, name: &str) -> Option<&BackendProfile> {
        self.backends.iter().find(|b| b.name == name)
    }

    pub fn default_backend_profile(&self) -> &BackendProfile {
        self.backend(&self.default_backend)
            .expect("validated config has its default backend")
    }

    /// Parse and validate a TOML document.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }
}

/// Load and validate a configuration file.
pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ConfigError::Missing(path.to_path_buf())
        } else {
            ConfigError::Read {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    let mut cfg = Config::from_toml(&text)?;
    // Relative paths in the file are relative to the file itself.
    if let Some(base) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        cfg.rebase_paths(base);
    }
    Ok(cfg)
}

impl Config {
    fn rebase_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.env.data_root);
        if let Some(p) = self.policy.prefix_dir.as_mut() {
            fix(p);
        }
        fix(&mut self.bench.results_dir);
        for p in [&mut self.rag.corpus_manifest, &mut self.rag.snapshot_path].into_iter().flatten() {
            fix(p);
        }
        for b in &mut self.backends {
            if let Some(p) = b.script_file.as_mut() {
                fix(p);
            }
        }
    }
}

/// Write a configuration file. The document holds only credential variable
/// names, never key material.
pub fn save_config(config: &Config, path: &Path) -> Result<(), ConfigError> {
    fs::write(path, config.to_toml()).map_err(|source| ConfigError::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

/// Build the exact environment handed to a child process: the published
/// data variable(s) plus every allowlisted variable present in the parent.
pub fn resolve_child_env(
    env: &EnvSpec,
    parent_env: &BTreeMap<String, String>,
) -> BTreeMap<String, String> {
    let mut out: BTreeMap<String, String> = env
        .passthrough_vars
        .iter()
        .filter_map(|k| parent_env.get(k).map(|v| (k.clone(), v.clone())))
        .collect();
    let root = env.data_root.to_string_lossy().into_owned();
    for name in env.published_names() {
        out.insert(name.to_string(), root.clone());
    }
    out
}
