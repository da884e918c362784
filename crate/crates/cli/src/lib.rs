//! `scriptloop` command line.
//!
//! Settings resolve as flag > environment variable > config file > built-in
//! default. The environment variables are listed on each flag.
//!
//! Exit codes:
//!
//! | code | meaning                                               |
//! |------|-------------------------------------------------------|
//! | 0    | success                                               |
//! | 1    | partial failure (fetch-data entries failed)           |
//! | 2    | generate: attempt budget exhausted (or cancelled)     |
//! | 3    | generate: backend error                               |
//! | 64   | usage error                                           |
//! | 65   | invalid input data (config, suite, manifest, index)   |
//! | 66   | input file missing                                    |
//! | 70   | internal or runtime failure                           |
//! | 73   | cannot create output                                  |
//! | 74   | I/O error                                             |

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use scriptloop::config::{ConfigError, ReasoningEffort};
use scriptloop::dataset::{fetch, DatasetManifest, FetchOptions, ManifestError};
use scriptloop::harness::{emit_report, write_reports, ReportFormat, Suite, SuiteError};
use scriptloop::persist::{attempt_dir_name, run_dir, script_file_name};
use scriptloop::rag::{build_index, load_corpus, load_snapshot, save_snapshot, RagIndex};
use scriptloop::{build_system_message, ChatBackend, Config, RunRecord, RunStatus, Runner, ValidatorSpec};
use scriptloop_service::ServiceState;

pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const PARTIAL: i32 = 1;
    pub const BUDGET_EXHAUSTED: i32 = 2;
    pub const BACKEND_ERROR: i32 = 3;
    pub const USAGE: i32 = 64;
    pub const DATA: i32 = 65;
    pub const NO_INPUT: i32 = 66;
    pub const SOFTWARE: i32 = 70;
    pub const CANT_CREATE: i32 = 73;
    pub const IO: i32 = 74;
}

pub const DEFAULT_CONFIG_FILE: &str = "scriptloop.toml";

#[derive(Debug, Parser)]
#[command(name = "scriptloop", version, about = "Generate, run, check and repair analysis scripts")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Config file [env: SCRIPTLOOP_CONFIG] (default: ./scriptloop.toml when present)
    #[arg(short, long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a script for a prompt and repair it until it validates
    Generate(GenerateArgs),
    /// Print the resolved configuration
    ConfigShow,
    /// Write a default configuration file
    ConfigInit {
        /// Destination (default: the --config path, else ./scriptloop.toml)
        #[arg(long)]
        path: Option<PathBuf>,
        /// Overwrite an existing file
        #[arg(long)]
        force: bool,
    },
    /// Download a dataset described by a manifest
    FetchData {
        /// Manifest file (default: the bundled H.E.S.S. DL3 DR1 sample)
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Target directory [env: SCRIPTLOOP_DATA_ROOT]
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// Re-download files that are already present
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
    },
    /// Build and snapshot the retrieval index
    BuildIndex {
        /// Corpus manifest (default: rag.corpus_manifest)
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Snapshot destination (default: rag.snapshot_path)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Backend whose embedding model is used [env: SCRIPTLOOP_BACKEND]
        #[arg(long)]
        backend: Option<String>,
    },
    /// Run a benchmark suite and write reports
    Bench(BenchArgs),
    /// Start the HTTP service
    Serve {
        /// Listen address (default: service.bind)
        #[arg(long)]
        bind: Option<String>,
    },
    /// Print the system message sent at the start of every run
    PrintSystemMessage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Effort {
    Low,
    Medium,
    High,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Task description
    #[arg(short, long)]
    pub prompt: String,
    /// Backend name [env: SCRIPTLOOP_BACKEND]
    #[arg(short, long)]
    pub backend: Option<String>,
    /// Attempt budget [env: SCRIPTLOOP_MAX_ATTEMPTS]
    #[arg(long, visible_alias = "speed", value_parser = clap::value_parser!(u32).range(1..))]
    pub max_attempts: Option<u32>,
    /// Per-attempt execution timeout in seconds [env: SCRIPTLOOP_EXEC_TIMEOUT]
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Reasoning effort for this run
    #[arg(long, value_enum)]
    pub effort: Option<Effort>,
    /// Data root published to scripts [env: SCRIPTLOOP_DATA_ROOT]
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Run-folder prefix; implies --persist [env: SCRIPTLOOP_PREFIX]
    #[arg(long)]
    pub prefix: Option<PathBuf>,
    /// Persist run folders [env: SCRIPTLOOP_PERSIST=true|false]
    #[arg(long, overrides_with = "no_persist")]
    pub persist: bool,
    #[arg(long)]
    pub no_persist: bool,
    /// Inject retrieved tutorial snippets (needs rag.snapshot_path)
    #[arg(long)]
    pub rag: bool,
    /// Require `MARKER=<int>` on stdout; repeatable
    #[arg(long, value_name = "MARKER=INT")]
    pub expect_int: Vec<String>,
    /// Require `MARKER=<float>` on stdout; repeatable
    #[arg(long, value_name = "MARKER=FLOAT")]
    pub expect_float: Vec<String>,
    /// Relative tolerance for --expect-float
    #[arg(long)]
    pub rel_tol: Option<f64>,
    /// Absolute tolerance for --expect-float
    #[arg(long)]
    pub abs_tol: Option<f64>,
    #[arg(long, value_enum, default_value = "text")]
    pub output: OutputFormat,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Suite fixture file (default: the bundled four-task suite)
    #[arg(long)]
    pub suite: Option<PathBuf>,
    /// Backend to benchmark; repeatable (default: the default backend)
    #[arg(short, long)]
    pub backend: Vec<String>,
    /// Overrides the suite's repetitions
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub repetitions: Option<u32>,
    /// Attempt budget [env: SCRIPTLOOP_MAX_ATTEMPTS]
    #[arg(long, visible_alias = "speed", value_parser = clap::value_parser!(u32).range(1..))]
    pub max_attempts: Option<u32>,
    /// Data root published to scripts [env: SCRIPTLOOP_DATA_ROOT]
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Report directory (default: bench.results_dir)
    #[arg(long)]
    pub results_dir: Option<PathBuf>,
    /// Keep run folders for every benchmark run under this prefix
    #[arg(long)]
    pub prefix: Option<PathBuf>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long, value_enum, default_value = "text")]
    pub output: OutputFormat,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match &e {
            ConfigError::Missing(_) => exit::NO_INPUT,
            ConfigError::Read { .. } => exit::IO,
            ConfigError::Unwritable { .. } => exit::CANT_CREATE,
            _ => exit::DATA,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<SuiteError> for CliError {
    fn from(e: SuiteError) -> Self {
        let code = match &e {
            SuiteError::Read { source, .. } if source.kind() == std::io::ErrorKind::NotFound => exit::NO_INPUT,
            SuiteError::Read { .. } => exit::IO,
            _ => exit::DATA,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        let code = match &e {
            ManifestError::Read { source, .. } if source.kind() == std::io::ErrorKind::NotFound => exit::NO_INPUT,
            ManifestError::Read { .. } => exit::IO,
            _ => exit::DATA,
        };
        CliError::new(code, e.to_string())
    }
}

type CliResult = Result<i32, CliError>;

/// Parse `argv` and run. `env` stands in for the process environment when
/// resolving settings and building the child environment.
pub fn main_with<I, T>(argv: I, env: &BTreeMap<String, String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, env, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(argv: I, env: &BTreeMap<String, String>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    exit::SUCCESS
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    exit::USAGE
                }
            };
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_new(env.get("RUST_LOG").map(String::as_str).unwrap_or("warn"))
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .try_init();
    match dispatch(cli, env, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn config_path(cli_path: Option<&Path>, env: &BTreeMap<String, String>) -> Option<PathBuf> {
    cli_path
        .map(Path::to_path_buf)
        .or_else(|| env.get("SCRIPTLOOP_CONFIG").map(PathBuf::from))
}

fn resolve_config(cli_path: Option<&Path>, env: &BTreeMap<String, String>) -> Result<Config, CliError> {
    match config_path(cli_path, env) {
        Some(p) => Ok(scriptloop::load_config(&p)?),
        None => {
            let local = PathBuf::from(DEFAULT_CONFIG_FILE);
            if local.is_file() {
                Ok(scriptloop::load_config(&local)?)
            } else {
                Ok(Config::default())
            }
        }
    }
}

fn env_parse<T: std::str::FromStr>(env: &BTreeMap<String, String>, name: &str) -> Result<Option<T>, CliError> {
    match env.get(name) {
        None => Ok(None),
        Some(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::new(exit::USAGE, format!("{name}: cannot parse `{v}`"))),
    }
}

fn pick<T>(flag: Option<T>, env: &BTreeMap<String, String>, name: &str) -> Result<Option<T>, CliError>
where
    T: std::str::FromStr,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => env_parse(env, name),
    }
}

fn connect(config: &Config, name: &str) -> Result<Arc<dyn ChatBackend>, CliError> {
    let profile = config
        .backend(name)
        .ok_or_else(|| CliError::new(exit::USAGE, format!("unknown backend `{name}`")))?;
    scriptloop::connect(profile, &config.contracts.language).map_err(|e| CliError::new(exit::DATA, e.to_string()))
}

fn split_marker<'a>(spec: &'a str, flag: &str) -> Result<(&'a str, &'a str), CliError> {
    spec.split_once('=')
        .filter(|(k, v)| !k.is_empty() && !v.is_empty())
        .ok_or_else(|| CliError::new(exit::USAGE, format!("{flag} expects MARKER=VALUE, got `{spec}`")))
}

fn build_validator(args: &GenerateArgs) -> Result<ValidatorSpec, CliError> {
    let mut children = Vec::new();
    for spec in &args.expect_int {
        let (marker, value) = split_marker(spec, "--expect-int")?;
        let value: i64 = value
            .parse()
            .map_err(|_| CliError::new(exit::USAGE, format!("--expect-int: `{value}` is not an integer")))?;
        children.push(ValidatorSpec::stdout_int(marker, value));
    }
    for spec in &args.expect_float {
        let (marker, value) = split_marker(spec, "--expect-float")?;
        let value: f64 = value
            .parse()
            .map_err(|_| CliError::new(exit::USAGE, format!("--expect-float: `{value}` is not a number")))?;
        children.push(ValidatorSpec::StdoutFloat {
            marker: marker.to_string(),
            expected_float: Some(value),
            rel_tol: args.rel_tol,
            abs_tol: args.abs_tol,
        });
    }
    let spec = match children.len() {
        0 => ValidatorSpec::ExitCode,
        1 => children.remove(0),
        _ => ValidatorSpec::AllOf { children },
    };
    spec.check().map_err(|e| CliError::new(exit::USAGE, e.to_string()))?;
    Ok(spec)
}

fn load_rag(config: &Config) -> Result<RagIndex, CliError> {
    let path = config
        .rag
        .snapshot_path
        .as_ref()
        .ok_or_else(|| CliError::new(exit::USAGE, "--rag needs rag.snapshot_path in the config"))?;
    load_snapshot(path).map_err(|e| CliError::new(exit::DATA, e.to_string()))
}

fn final_script_path(prefix: &Path, record: &RunRecord, language: &str) -> Option<PathBuf> {
    let index = record.attempts.iter().rev().find(|a| a.script.is_some())?.index;
    Some(
        run_dir(prefix, &record.run_id)
            .join(attempt_dir_name(index))
            .join(script_file_name(language)),
    )
}

fn generate(mut config: Config, args: GenerateArgs, env: &BTreeMap<String, String>, out: &mut dyn Write) -> CliResult {
    let validator = build_validator(&args)?;
    let backend_name = args
        .backend
        .clone()
        .or_else(|| env.get("SCRIPTLOOP_BACKEND").cloned())
        .unwrap_or_else(|| config.default_backend.clone());
    if let Some(n) = pick(args.max_attempts, env, "SCRIPTLOOP_MAX_ATTEMPTS")? {
        if n == 0 {
            return Err(CliError::new(exit::USAGE, "max attempts must be >= 1"));
        }
        config.policy.max_attempts = n;
    }
    if let Some(t) = pick(args.timeout, env, "SCRIPTLOOP_EXEC_TIMEOUT")? {
        if !(t > 0.0 && t.is_finite()) {
            return Err(CliError::new(exit::USAGE, "timeout must be > 0"));
        }
        config.policy.exec_timeout_s = t;
    }
    if let Some(root) = pick(args.data_root.clone(), env, "SCRIPTLOOP_DATA_ROOT")? {
        config.env.data_root = root;
    }
    if let Some(effort) = args.effort {
        let effort = match effort {
            Effort::Low => ReasoningEffort::Low,
            Effort::Medium => ReasoningEffort::Medium,
            Effort::High => ReasoningEffort::High,
        };
        config
            .backends
            .iter_mut()
            .filter(|b| b.name == backend_name)
            .for_each(|b| b.reasoning_effort = effort);
    }
    let prefix_override = pick(args.prefix.clone(), env, "SCRIPTLOOP_PREFIX")?;
    if let Some(p) = &prefix_override {
        config.policy.prefix_dir = Some(p.clone());
    }
    let persist = if args.no_persist {
        false
    } else if args.persist || args.prefix.is_some() {
        true
    } else if let Some(v) = env_parse::<bool>(env, "SCRIPTLOOP_PERSIST")? {
        v
    } else {
        config.policy.persist || prefix_override.is_some()
    };
    if persist && config.policy.prefix_dir.is_none() {
        return Err(CliError::new(exit::USAGE, "persistence needs --prefix or policy.prefix_dir"));
    }
    config.policy.persist = persist;
    config.validate()?;

    let backend = connect(&config, &backend_name)?;
    let rag = if args.rag || config.rag.enabled {
        Some(load_rag(&config)?)
    } else {
        None
    };
    let prefix = persist.then(|| config.policy.prefix_dir.clone()).flatten();
    let mut runner = Runner::new(&config, Arc::clone(&backend))
        .with_parent_env(env.clone())
        .with_persistence(prefix.clone());
    if let Some(index) = &rag {
        runner = runner.with_rag(index, &*backend);
    }
    let record = runner.run(&args.prompt, &validator);

    let folder = prefix.as_ref().map(|p| run_dir(p, &record.run_id));
    let script = prefix
        .as_ref()
        .and_then(|p| final_script_path(p, &record, &config.contracts.language));
    match args.output {
        OutputFormat::Structured => {
            let doc = json!({
                "run_id": record.run_id,
                "backend": record.backend,
                "status": record.status,
                "cancelled": record.cancelled,
                "attempts": record.attempts.len(),
                "attempts_to_pass": record.attempts_to_pass(),
                "total_usage": record.total_usage,
                "run_folder": folder,
                "final_script": script,
                "error": record.error,
            });
            writeln!(out, "{}", serde_json::to_string_pretty(&doc).expect("json"))
                .map_err(|e| CliError::new(exit::IO, e.to_string()))?;
        }
        OutputFormat::Text => {
            let u = record.total_usage;
            let mut text = format!(
                "run_id: {}\nstatus: {}\nattempts: {}\n",
                record.run_id,
                record.status.as_str(),
                record.attempts.len()
            );
            if let Some(k) = record.attempts_to_pass() {
                text.push_str(&format!("attempts_to_pass: {k}\n"));
            }
            text.push_str(&format!(
                "tokens: input={} cached_input={} output={} reasoning={}\n",
                u.input, u.cached_input, u.output, u.reasoning
            ));
            if let Some(f) = &folder {
                text.push_str(&format!("run_folder: {}\n", f.display()));
            }
            match &script {
                Some(s) => text.push_str(&format!("final_script: {}\n", s.display())),
                None if prefix.is_none() => {
                    if let Some(s) = record.final_script() {
                        text.push_str(&format!("final_script: (not persisted)\n\n{}\n", s.text));
                    }
                }
                None => {}
            }
            if let Some(e) = &record.error {
                text.push_str(&format!("error: {e}\n"));
            }
            write!(out, "{text}").map_err(|e| CliError::new(exit::IO, e.to_string()))?;
        }
    }
    Ok(match record.status {
        RunStatus::Success => exit::SUCCESS,
        RunStatus::BudgetExhausted => exit::BUDGET_EXHAUSTED,
        RunStatus::BackendError => exit::BACKEND_ERROR,
    })
}

fn bench(mut config: Config, args: BenchArgs, env: &BTreeMap<String, String>, out: &mut dyn Write) -> CliResult {
    let mut suite = match &args.suite {
        Some(p) => scriptloop::load_suite(p)?,
        None => Suite::default_suite(),
    };
    if let Some(r) = args.repetitions {
        suite.repetitions = r;
    }
    if let Some(n) = pick(args.max_attempts, env, "SCRIPTLOOP_MAX_ATTEMPTS")? {
        suite.max_attempts = Some(n);
    }
    if let Some(root) = pick(args.data_root.clone(), env, "SCRIPTLOOP_DATA_ROOT")? {
        config.env.data_root = root;
    }
    if let Some(p) = args.parallelism {
        config.bench.parallelism = p.max(1);
    }
    let names = if args.backend.is_empty() {
        vec![env
            .get("SCRIPTLOOP_BACKEND")
            .cloned()
            .unwrap_or_else(|| config.default_backend.clone())]
    } else {
        args.backend.clone()
    };
    let backends = names
        .iter()
        .map(|n| connect(&config, n))
        .collect::<Result<Vec<_>, _>>()?;
    let rag_needed = suite.tasks.iter().any(|t| t.rag_enabled);
    let rag = if rag_needed && config.rag.snapshot_path.is_some() {
        Some(load_rag(&config)?)
    } else {
        None
    };
    let rag_pair = rag.as_ref().map(|i| (i, &*backends[0] as &dyn scriptloop::Embedder));
    let report = scriptloop::run_benchmark(&suite, &backends, &config, rag_pair, args.prefix.as_deref());
    let dir = args.results_dir.clone().unwrap_or_else(|| config.bench.results_dir.clone());
    write_reports(&report, &dir).map_err(|e| CliError::new(exit::CANT_CREATE, format!("{}: {e}", dir.display())))?;
    let format = match args.output {
        OutputFormat::Text => ReportFormat::Table,
        OutputFormat::Structured => ReportFormat::Structured,
    };
    write!(out, "{}", emit_report(&report, format)).map_err(|e| CliError::new(exit::IO, e.to_string()))?;
    if format == ReportFormat::Structured {
        writeln!(out).map_err(|e| CliError::new(exit::IO, e.to_string()))?;
    }
    Ok(exit::SUCCESS)
}

fn dispatch(cli: Cli, env: &BTreeMap<String, String>, out: &mut dyn Write) -> CliResult {
    let io = |e: std::io::Error| CliError::new(exit::IO, e.to_string());
    match cli.command {
        Command::ConfigInit { path, force } => {
            let path = path
                .or_else(|| config_path(cli.config.as_deref(), env))
                .unwrap_or_else(|| PathBuf::from(DEFAULT_CONFIG_FILE));
            if path.exists() && !force {
                return Err(CliError::new(
                    exit::CANT_CREATE,
                    format!("{} exists; pass --force to overwrite", path.display()),
                ));
            }
            scriptloop::save_config(&Config::default(), &path)?;
            writeln!(out, "wrote {}", path.display()).map_err(io)?;
            Ok(exit::SUCCESS)
        }
        Command::ConfigShow => {
            let config = resolve_config(cli.config.as_deref(), env)?;
            // credentials are stored by variable name only; report whether
            // each is set without echoing the value
            write!(out, "{}", config.to_toml()).map_err(io)?;
            for b in &config.backends {
                if let Some(var) = &b.api_key_env {
                    let state = if env.contains_key(var) { "set" } else { "unset" };
                    writeln!(out, "# backend {}: credential variable {var} is {state}", b.name).map_err(io)?;
                }
            }
            Ok(exit::SUCCESS)
        }
        Command::PrintSystemMessage => {
            let config = resolve_config(cli.config.as_deref(), env)?;
            writeln!(out, "{}", build_system_message(&config.contracts).content()).map_err(io)?;
            Ok(exit::SUCCESS)
        }
        Command::Generate(args) => {
            let config = resolve_config(cli.config.as_deref(), env)?;
            generate(config, args, env, out)
        }
        Command::Bench(args) => {
            let config = resolve_config(cli.config.as_deref(), env)?;
            bench(config, args, env, out)
        }
        Command::FetchData {
            manifest,
            data_root,
            force,
            parallelism,
        } => {
            let config = resolve_config(cli.config.as_deref(), env)?;
            let manifest = match &manifest {
                Some(p) => DatasetManifest::load(p)?,
                None => DatasetManifest::sample(),
            };
            let root = pick(data_root, env, "SCRIPTLOOP_DATA_ROOT")?.unwrap_or(config.env.data_root);
            let summary = fetch(
                &manifest,
                &root,
                &FetchOptions {
                    force,
                    parallelism,
                    ..FetchOptions::default()
                },
            )
            .map_err(|e| CliError::new(exit::CANT_CREATE, e.to_string()))?;
            writeln!(
                out,
                "{}: downloaded {}, skipped {}, failed {}",
                manifest.name,
                summary.downloaded,
                summary.skipped,
                summary.failed.len()
            )
            .map_err(io)?;
            for f in &summary.failed {
                writeln!(out, "  failed {}: {}", f.relative_path.display(), f.reason).map_err(io)?;
            }
            Ok(if summary.failed.is_empty() {
                exit::SUCCESS
            } else {
                exit::PARTIAL
            })
        }
        Command::BuildIndex { corpus, out: dest, backend } => {
            let config = resolve_config(cli.config.as_deref(), env)?;
            let corpus = corpus
                .or_else(|| config.rag.corpus_manifest.clone())
                .ok_or_else(|| CliError::new(exit::USAGE, "no corpus manifest: pass --corpus or set rag.corpus_manifest"))?;
            let dest = dest
                .or_else(|| config.rag.snapshot_path.clone())
                .ok_or_else(|| CliError::new(exit::USAGE, "no destination: pass --out or set rag.snapshot_path"))?;
            let name = backend
                .or_else(|| env.get("SCRIPTLOOP_BACKEND").cloned())
                .unwrap_or_else(|| config.default_backend.clone());
            let embedder = connect(&config, &name)?;
            let sources = load_corpus(&corpus).map_err(|e| CliError::new(exit::DATA, e.to_string()))?;
            let index = build_index(&sources, &config.rag, &config.contracts, &*embedder)
                .map_err(|e| CliError::new(exit::SOFTWARE, e.to_string()))?;
            save_snapshot(&index, &dest).map_err(|e| CliError::new(exit::CANT_CREATE, e.to_string()))?;
            writeln!(
                out,
                "indexed {} chunk(s) from {} source(s) into {}\nfingerprint: {}",
                index.chunks.len(),
                sources.len(),
                dest.display(),
                index.corpus_fingerprint
            )
            .map_err(io)?;
            Ok(exit::SUCCESS)
        }
        Command::Serve { bind } => {
            let config = resolve_config(cli.config.as_deref(), env)?;
            let bind = bind.unwrap_or_else(|| config.service.bind.clone());
            let addr = bind
                .parse()
                .map_err(|_| CliError::new(exit::USAGE, format!("invalid bind address `{bind}`")))?;
            let state = ServiceState::from_config(config).map_err(|e| CliError::new(exit::DATA, e.to_string()))?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::new(exit::SOFTWARE, e.to_string()))?;
            runtime
                .block_on(scriptloop_service::serve(Arc::new(state), addr))
                .map_err(|e| CliError::new(exit::SOFTWARE, e.to_string()))?;
            Ok(exit::SUCCESS)
        }
    }
}
