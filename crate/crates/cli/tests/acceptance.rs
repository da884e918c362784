//! Acceptance checks. Each check prints one PASS/FAIL line; the process
//! exits non-zero when any check fails.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use scriptloop::chat::{Embedder, HashEmbedder};
use scriptloop::config::{resolve_child_env, BackendProfile, EnvSpec};
use scriptloop::contracts::ExtractError;
use scriptloop::harness::{run_benchmark, Suite};
use scriptloop::persist::{attempt_dir_name, run_dir, OUTCOME_FILE, STDERR_FILE, STDOUT_FILE, TRANSCRIPT_FILE};
use scriptloop::rag::{build_index, chunk, corpus_fingerprint, preprocess_tutorial, query, round_score, RagParams};
use scriptloop::sandbox::Executor;
use scriptloop::validate::within_tolerance;
use scriptloop::{
    extract_script, validate, ChatBackend, Config, ContractRules, RunStatus, Runner, ScriptSource, ScriptedBackend,
    ScriptedReply, ScriptedRoute, TokenUsage, ValidatorSpec,
};

type Check = Result<(), String>;
type Named = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fenced(code: &str) -> String {
    format!("Here is the script.\n\n```python\n{code}\n```\n")
}

const PASS_SCRIPT: &str = "print('N_OBS=4')";
const FAIL_SCRIPT: &str = "import nonexistent_module_xyz";

fn offline_config(data_root: &Path) -> Config {
    let mut cfg = Config::default();
    cfg.env.data_root = data_root.to_path_buf();
    cfg.policy.exec_timeout_s = 20.0;
    cfg
}

fn fail_then_pass(k: u32, usage: impl Fn(u32) -> TokenUsage) -> Arc<dyn ChatBackend> {
    let replies = (1..=k)
        .map(|i| {
            let body = if i < k { FAIL_SCRIPT } else { PASS_SCRIPT };
            ScriptedReply::new(fenced(body)).with_usage(usage(i))
        })
        .collect();
    Arc::new(ScriptedBackend::sequence("scripted", replies))
}

fn n_obs() -> ValidatorSpec {
    ValidatorSpec::stdout_int("N_OBS", 4)
}

// ── 1 ────────────────────────────────────────────────────────────────

fn loop_semantics() -> Check {
    let data = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = offline_config(data.path());
    let started = Instant::now();
    for k in 1..=5u32 {
        for budget in 1..=5u32 {
            let rec = Runner::new(&cfg, fail_then_pass(k, |_| TokenUsage::default()))
                .with_max_attempts(budget)
                .run("count", &n_obs());
            let want_success = k <= budget;
            ensure!(
                (rec.status == RunStatus::Success) == want_success,
                "k={k} budget={budget}: status {:?}",
                rec.status
            );
            let want_pass = want_success.then_some(k);
            ensure!(
                rec.attempts_to_pass() == want_pass,
                "k={k} budget={budget}: attempts_to_pass {:?}",
                rec.attempts_to_pass()
            );
            ensure!(rec.attempts.len() as u32 == k.min(budget), "k={k} budget={budget}: attempt count");
        }
    }
    let took = started.elapsed();
    ensure!(took < Duration::from_secs(10), "grid took {took:?}");
    Ok(())
}

// ── 2 ────────────────────────────────────────────────────────────────

fn single_script_contract() -> Check {
    type Want = Result<&'static str, fn(&ExtractError) -> bool>;
    let multiple: fn(&ExtractError) -> bool = |e| matches!(e, ExtractError::MultipleCodeBlocks(_));
    let none: fn(&ExtractError) -> bool = |e| *e == ExtractError::NoCodeBlock;
    let cases: Vec<(&str, String, Want)> = vec![
        ("one tagged block", fenced("print(1)"), Ok("print(1)")),
        ("one untagged block", "```\nx = 2\nprint(x)\n```".into(), Ok("x = 2\nprint(x)")),
        ("prose around one block", "Sure.\n```python\nimport os\n```\nDone.".into(), Ok("import os")),
        ("two blocks", format!("{}{}", fenced("a = 1"), fenced("b = 2")), Err(multiple)),
        ("three blocks", fenced("a = 1").repeat(3), Err(multiple)),
        ("block plus shell block", format!("{}```bash\nls\n```\n", fenced("a = 1")), Err(multiple)),
        ("prose only", "I would select the runs near the source first.".into(), Err(none)),
        ("empty reply", String::new(), Err(none)),
        ("bare script", "import os\nprint(os.getcwd())\n".into(), Ok("import os\nprint(os.getcwd())\n")),
        ("unterminated fence", "```python\nprint(1)\n".into(), Err(none)),
        ("wrong language tag", "```bash\necho hi\n```".into(), Err(|e| matches!(e, ExtractError::TagConflict { .. }))),
        ("empty block", "```python\n\n```".into(), Err(|e| *e == ExtractError::EmptyScript)),
    ];
    ensure!(cases.len() == 12, "corpus size {}", cases.len());
    for (name, text, want) in &cases {
        let got = extract_script(text, "python");
        match (want, &got) {
            (Ok(body), Ok(s)) => ensure!(s.text == *body, "{name}: extracted {:?}", s.text),
            (Err(pred), Err(e)) => ensure!(pred(e), "{name}: wrong rejection {e:?}"),
            _ => return Err(format!("{name}: got {got:?}")),
        }
    }

    // a multi-block reply whose blocks would leave a trace if run
    let data = tempfile::tempdir().map_err(|e| e.to_string())?;
    let marker = data.path().join("ran");
    let body = format!("open({:?}, 'w').write('x')", marker.display().to_string());
    let reply = format!("{}{}", fenced(&body), fenced(&body));
    let cfg = offline_config(data.path());
    let backend = Arc::new(ScriptedBackend::sequence("multi", vec![ScriptedReply::new(reply)]));
    let rec = Runner::new(&cfg, backend).with_max_attempts(3).run("x", &ValidatorSpec::ExitCode);
    ensure!(rec.attempts.len() == 3, "expected 3 attempts");
    ensure!(rec.attempts.iter().all(|a| a.exec.is_none()), "a multi-block reply executed");
    ensure!(!marker.exists(), "marker file written");
    Ok(())
}

// ── 3 ────────────────────────────────────────────────────────────────

fn validator_arithmetic() -> Check {
    let mut rng = StdRng::seed_from_u64(0x7e57);
    let mut disagreements = 0;
    for i in 0..1000 {
        let expected: f64 = rng.gen_range(-1e4..1e4) * 10f64.powi(rng.gen_range(-6..4));
        let rel_tol: f64 = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..0.3) };
        let abs_tol: f64 = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..0.5) * expected.abs().max(1e-3) };
        let bound = abs_tol + rel_tol * expected.abs();
        // half near the boundary, half anywhere
        let observed = if i % 2 == 0 {
            expected + bound * rng.gen_range(-1.2..1.2)
        } else {
            expected + rng.gen_range(-2.0..2.0) * expected.abs().max(1.0)
        };
        let oracle = (observed - expected).abs() <= abs_tol + rel_tol * expected.abs();
        let spec = ValidatorSpec::stdout_float("V", expected, rel_tol, abs_tol);
        let exec = scriptloop::ExecutionResult {
            exit_code: Some(0),
            stdout: format!("V={observed:e}\n"),
            stderr: String::new(),
            duration_ms: 1,
            timed_out: false,
            cancelled: false,
            workdir: PathBuf::new(),
            network_isolated: false,
        };
        let passed = validate(&spec, &exec).passed;
        if passed != oracle || within_tolerance(observed, expected, rel_tol, abs_tol) != oracle {
            disagreements += 1;
        }
    }
    ensure!(disagreements == 0, "{disagreements} disagreements");
    Ok(())
}

// ── 4 ────────────────────────────────────────────────────────────────

fn pid_alive(pid: i32) -> bool {
    match fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => !stat.split_whitespace().nth(2).is_some_and(|s| s == "Z"),
        Err(_) => false,
    }
}

fn timeout_hardness() -> Check {
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let work = scratch.path().join("work");
    fs::create_dir(&work).map_err(|e| e.to_string())?;
    let pidfile = scratch.path().join("grandchild.pid");
    let script = format!(
        "import subprocess, time\np = subprocess.Popen(['sleep', '30'])\nopen({:?}, 'w').write(str(p.pid))\ntime.sleep(30)\n",
        pidfile.display().to_string()
    );
    let started = Instant::now();
    let r = Executor::new(vec!["python3".into(), "{script}".into()], Duration::from_secs(1))
        .execute(&ScriptSource::new(script, "python"), &BTreeMap::new(), &work, None)
        .map_err(|e| e.to_string())?;
    let took = started.elapsed();
    ensure!(r.timed_out, "timed_out is false");
    ensure!(took < Duration::from_secs(3), "returned after {took:?}");
    let pid: i32 = fs::read_to_string(&pidfile)
        .map_err(|e| format!("grandchild pid: {e}"))?
        .trim()
        .parse()
        .map_err(|e| format!("grandchild pid: {e}"))?;
    let deadline = Instant::now() + Duration::from_secs(2);
    while pid_alive(pid) && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(20));
    }
    ensure!(!pid_alive(pid), "grandchild {pid} still alive");
    Ok(())
}

// ── 5 ────────────────────────────────────────────────────────────────

fn environment_isolation() -> Check {
    let parent: BTreeMap<String, String> = [
        ("LANG", "C.UTF-8"),
        ("TZ", "UTC"),
        ("HOME", "/root"),
        ("OPENAI_API_KEY", "sk-secret"),
        ("PATH", "/usr/bin:/bin"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let spec = EnvSpec {
        data_root: "/srv/hess".into(),
        passthrough_vars: vec!["LANG".into(), "TZ".into(), "NOT_IN_PARENT".into()],
        ..EnvSpec::default()
    };
    let env = resolve_child_env(&spec, &parent);
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let probe = "for kv in open('/proc/self/environ','rb').read().split(b'\\0'):\n    if kv:\n        print(kv.decode())\n";
    let r = Executor::new(vec!["python3".into(), "{script}".into()], Duration::from_secs(10))
        .execute(&ScriptSource::new(probe, "python"), &env, work.path(), None)
        .map_err(|e| e.to_string())?;
    ensure!(r.exit_code == Some(0), "probe failed: {}", r.stderr);
    let seen: BTreeSet<(String, String)> = r
        .stdout
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let want: BTreeSet<(String, String)> = [("LANG", "C.UTF-8"), ("TZ", "UTC"), ("PHOTON_STORAGE", "/srv/hess")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    ensure!(seen == want, "child saw {seen:?}");
    Ok(())
}

// ── 6 ────────────────────────────────────────────────────────────────

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = fs::read(entry.path()).map_err(|e| e.to_string())?;
        out.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
    }
    Ok(out)
}

fn run_folder_completeness() -> Check {
    let data = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = offline_config(data.path());
    // deterministic output on both streams; no interpreter paths in stderr
    let replies = vec![
        ScriptedReply::new(fenced("import sys\nprint('N_OBS=3')\nsys.stderr.write('partial\\n')")),
        ScriptedReply::new("no code here"),
        ScriptedReply::new(fenced("raise SystemExit('DataStore not found')")),
        ScriptedReply::new(fenced(PASS_SCRIPT)),
    ];
    let expected: BTreeSet<&str> = ["script.py", TRANSCRIPT_FILE, STDOUT_FILE, STDERR_FILE, OUTCOME_FILE].into();
    let mut trees = Vec::new();
    for _ in 0..2 {
        let prefix = tempfile::tempdir().map_err(|e| e.to_string())?;
        let backend = Arc::new(ScriptedBackend::sequence("det", replies.clone()));
        let rec = Runner::new(&cfg, backend)
            .with_persistence(Some(prefix.path().to_path_buf()))
            .with_run_id("fixed-run")
            .run("count", &n_obs());
        ensure!(rec.status == RunStatus::Success && rec.attempts.len() == 4, "unexpected run {:?}", rec.status);
        let mut tree = Vec::new();
        for a in &rec.attempts {
            let dir = run_dir(prefix.path(), &rec.run_id).join(attempt_dir_name(a.index));
            let files = snapshot(&dir)?;
            let names: BTreeSet<&str> = files.keys().map(String::as_str).collect();
            ensure!(names == expected, "attempt {} holds {names:?}", a.index);
            tree.push(files);
        }
        trees.push(tree);
    }
    ensure!(trees[0] == trees[1], "re-run artifacts differ");
    Ok(())
}

// ── 7 ────────────────────────────────────────────────────────────────

const WORDS: &[&str] = &[
    "DataStore", "obs", "select", "crab", "energy", "flux", "spectrum", "fit", "map", "dataset", "model",
    "power", "law", "index", "region", "reflected", "background", "exposure", "psf", "edisp",
];

fn random_doc(rng: &mut StdRng) -> String {
    (0..rng.gen_range(1..15))
        .map(|_| {
            (0..rng.gen_range(1..6))
                .map(|_| *WORDS.choose(rng).unwrap())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn rag_oracle_equivalence() -> Check {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let rules = ContractRules::default();
    let emb = HashEmbedder::new(16);
    for case in 0..50 {
        let params = RagParams {
            top_k: rng.gen_range(1..8),
            score_threshold: rng.gen_range(-0.2..0.6),
            chunk_size_chars: rng.gen_range(30..80),
            chunk_overlap_chars: rng.gen_range(0..10),
            ..RagParams::default()
        };
        let sources: Vec<(String, String)> = (0..rng.gen_range(1..12))
            .map(|i| (format!("doc{i:02}"), random_doc(&mut rng)))
            .collect();
        let prompt = (0..rng.gen_range(1..5))
            .map(|_| *WORDS.choose(&mut rng).unwrap())
            .collect::<Vec<_>>()
            .join(" ");
        let index = build_index(&sources, &params, &rules, &emb).map_err(|e| e.to_string())?;
        ensure!(index.chunks.len() <= 200, "case {case}: {} chunks", index.chunks.len());
        let got = query(&index, &prompt, &params, &emb).map_err(|e| e.to_string())?;

        let qv = emb.embed(std::slice::from_ref(&prompt)).map_err(|e| e.to_string())?.remove(0);
        let mut brute: Vec<(f64, String, usize)> = Vec::new();
        for (source_id, text) in &sources {
            let pieces = chunk(&preprocess_tutorial(text, &rules), &params)
                .into_iter()
                .filter(|c| !c.trim().is_empty());
            for (ordinal, piece) in pieces.enumerate() {
                let v = emb.embed(&[piece]).map_err(|e| e.to_string())?.remove(0);
                let s = round_score(cosine(&v, &qv));
                if s >= params.score_threshold {
                    brute.push((s, source_id.clone(), ordinal));
                }
            }
        }
        brute.sort_by(|a, b| match b.0.total_cmp(&a.0) {
            Ordering::Equal => (&a.1, a.2).cmp(&(&b.1, b.2)),
            o => o,
        });
        brute.truncate(params.top_k);
        let got_ids: Vec<(&str, usize)> = got.iter().map(|s| (s.source_id.as_str(), s.ordinal)).collect();
        let want_ids: Vec<(&str, usize)> = brute.iter().map(|b| (b.1.as_str(), b.2)).collect();
        ensure!(got_ids == want_ids, "case {case}: {got_ids:?} != {want_ids:?}");

        let fp = corpus_fingerprint(&sources, &params, &emb.identity());
        ensure!(index.corpus_fingerprint == fp, "case {case}: fingerprint");
        for _ in 0..3 {
            let again = build_index(&sources, &params, &rules, &emb).map_err(|e| e.to_string())?;
            ensure!(again.corpus_fingerprint == fp, "case {case}: rebuild fingerprint differs");
        }
    }
    Ok(())
}

// ── 8 ────────────────────────────────────────────────────────────────

const SUITE: &str = r#"
schema_version = 1

[[tasks]]
task_id = "ObservationList"
prompt = "task:obs"
validator = { kind = "stdout_int", marker = "N_OBS", expected_int = 4 }

[[tasks]]
task_id = "ReflectedSignificance"
prompt = "task:sig"
validator = { kind = "stdout_float", marker = "SIGNIFICANCE", expected_float = 30.5, rel_tol = 0.05 }

[[tasks]]
task_id = "ReflectedSpectrum"
prompt = "task:spec"
[tasks.validator]
kind = "all_of"
children = [
    { kind = "stdout_float", marker = "ENERGY_FLUX", expected_float = 3.5e-11, rel_tol = 0.1 },
    { kind = "stdout_float", marker = "INDEX", expected_float = 2.6, abs_tol = 0.05 },
]

[[tasks]]
task_id = "Source3DAnalysis"
prompt = "task:3d"
timeout_override_s = 20
validator = { kind = "exit_code" }
"#;

fn benchmark_accounting() -> Check {
    let u = |o, r| TokenUsage::new(1000, 200, o, r);
    let route = |tag: &str, replies: Vec<ScriptedReply>| ScriptedRoute {
        when_prompt_contains: Some(tag.into()),
        replies,
    };
    let backend: Arc<dyn ChatBackend> = Arc::new(ScriptedBackend::new(
        "scripted",
        vec![
            route("task:obs", vec![ScriptedReply::new(fenced("print('N_OBS=4')")).with_usage(u(300, 100))]),
            route(
                "task:sig",
                vec![
                    ScriptedReply::new(fenced("import gammapy_missing")).with_usage(u(400, 200)),
                    ScriptedReply::new(fenced("print('SIGNIFICANCE=31.0')")).with_usage(u(500, 300)),
                ],
            ),
            route(
                "task:spec",
                vec![
                    ScriptedReply::new(fenced("print('ENERGY_FLUX=1e-9')\nprint('INDEX=2.6')")).with_usage(u(600, 400)),
                    ScriptedReply::new(fenced("raise ValueError('bad fit')")).with_usage(u(700, 500)),
                    ScriptedReply::new(fenced("print('ENERGY_FLUX=3.6e-11')\nprint('INDEX=2.58')"))
                        .with_usage(u(7300, 6500)),
                ],
            ),
            route("task:3d", vec![ScriptedReply::new(fenced("x = sum(range(10))")).with_usage(u(800, 600))]),
        ],
    ));
    let data = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = offline_config(data.path());
    let suite = Suite::from_toml(SUITE).map_err(|e| e.to_string())?;
    let report = run_benchmark(&suite, &[backend], &cfg, None, None);

    let rows: Vec<(&str, f64, &[u32])> = report
        .rows
        .iter()
        .map(|r| (r.task_id.as_str(), r.pass_rate, r.attempts_histogram.as_slice()))
        .collect();
    let want: Vec<(&str, f64, &[u32])> = vec![
        ("ObservationList", 1.0, &[1, 0, 0, 0, 0]),
        ("ReflectedSignificance", 1.0, &[0, 1, 0, 0, 0]),
        ("ReflectedSpectrum", 1.0, &[0, 0, 1, 0, 0]),
        ("Source3DAnalysis", 1.0, &[1, 0, 0, 0, 0]),
    ];
    ensure!(rows == want, "rows {rows:?}");

    let scripted_sum = [(300, 100), (400, 200), (500, 300), (600, 400), (700, 500), (7300, 6500), (800, 600)]
        .into_iter()
        .map(|(o, r)| u(o, r))
        .sum::<TokenUsage>();
    ensure!(report.token_totals() == scripted_sum, "totals {:?}", report.token_totals());
    let per_row: TokenUsage = report.rows.iter().map(|r| r.token_totals).sum();
    ensure!(per_row == scripted_sum, "row totals {per_row:?}");
    let logged = report
        .results
        .iter()
        .flat_map(|r| &r.traces)
        .any(|t| t.usage.output == 7300 && t.usage.reasoning == 6500);
    ensure!(logged, "no trace with output 7300 / reasoning 6500");
    Ok(())
}

// ── 9 ────────────────────────────────────────────────────────────────

fn usage_additivity() -> Check {
    let mut rng = StdRng::seed_from_u64(0xadd);
    let data = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = offline_config(data.path());
    for case in 0..100 {
        let replies: Vec<ScriptedReply> = (0..rng.gen_range(1..5))
            .map(|_| {
                let text = match rng.gen_range(0..4) {
                    0 => fenced(PASS_SCRIPT),
                    // extraction and lint failures never reach the interpreter
                    1 => "no script, sorry".to_string(),
                    2 => fenced("import matplotlib.pyplot as plt\nplt.show()"),
                    _ => fenced("print('N_OBS=5')"),
                };
                let input = rng.gen_range(0..20_000u64);
                let output = rng.gen_range(0..10_000u64);
                ScriptedReply::new(text).with_usage(TokenUsage::new(
                    input,
                    rng.gen_range(0..=input),
                    output,
                    rng.gen_range(0..=output),
                ))
            })
            .collect();
        let budget = rng.gen_range(1..=5);
        let rec = Runner::new(&cfg, Arc::new(ScriptedBackend::sequence("rnd", replies)))
            .with_max_attempts(budget)
            .run("count", &n_obs());
        let mut sum = TokenUsage::default();
        for a in &rec.attempts {
            sum.input += a.usage.input;
            sum.cached_input += a.usage.cached_input;
            sum.output += a.usage.output;
            sum.reasoning += a.usage.reasoning;
        }
        ensure!(rec.total_usage == sum, "case {case}: {:?} != {sum:?}", rec.total_usage);
    }
    Ok(())
}

// ── 10 ───────────────────────────────────────────────────────────────

fn end_to_end_generate() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    fs::create_dir(&data).map_err(|e| e.to_string())?;
    fs::write(data.join("obs-index.txt"), "23523\n23526\n23559\n23592\n").map_err(|e| e.to_string())?;
    // first reply breaks a contract, second reads the data root and passes
    let replies = dir.path().join("replies.toml");
    let good = "import os\\nrows = open(os.path.join(os.environ['PHOTON_STORAGE'], 'obs-index.txt')).read().split()\\nprint(f'N_OBS={len(rows)}')";
    fs::write(
        &replies,
        format!(
            "[[routes]]\nreplies = [\n  {{ text = \"```python\\nimport matplotlib.pyplot as plt\\nplt.show()\\n```\" }},\n  {{ text = \"```python\\n{good}\\n```\", usage = {{ input = 900, cached_input = 0, output = 7300, reasoning = 6500 }} }},\n]\n"
        ),
    )
    .map_err(|e| e.to_string())?;
    let mut cfg = Config::default();
    cfg.backends.push(BackendProfile::scripted("offline", &replies));
    cfg.default_backend = "offline".into();
    cfg.env.data_root = data.clone();
    cfg.policy.exec_timeout_s = 20.0;
    let cfg_path = dir.path().join("scriptloop.toml");
    scriptloop::save_config(&cfg, &cfg_path).map_err(|e| e.to_string())?;
    let prefix = dir.path().join("runs");

    let out = Command::new(env!("CARGO_BIN_EXE_scriptloop"))
        .arg("--config")
        .arg(&cfg_path)
        .args(["generate", "--prompt", "How many observations are in the index?", "--expect-int", "N_OBS=4"])
        .arg("--prefix")
        .arg(&prefix)
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure!(
        out.status.code() == Some(0),
        "exit {:?}\n{stdout}{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    ensure!(stdout.contains("attempts_to_pass: 2"), "unexpected report:\n{stdout}");
    let script_path = stdout
        .lines()
        .find_map(|l| l.strip_prefix("final_script: "))
        .ok_or("no final_script line")?;
    let script = fs::read_to_string(script_path).map_err(|e| e.to_string())?;

    // re-execute the persisted script on its own
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let env = resolve_child_env(&cfg.env, &BTreeMap::new());
    let r = Executor::new(cfg.policy.interpreter.clone(), Duration::from_secs(20))
        .execute(&ScriptSource::new(script, "python"), &env, work.path(), None)
        .map_err(|e| e.to_string())?;
    let outcome = validate(&ValidatorSpec::stdout_int("N_OBS", 4), &r);
    ensure!(outcome.passed, "re-execution failed validation: {outcome:?}");
    Ok(())
}

fn main() {
    let checks: [Named; 10] = [
        ("loop semantics over k x budget grid", loop_semantics),
        ("single-script contract corpus", single_script_contract),
        ("validator tolerance arithmetic", validator_arithmetic),
        ("timeout kills process tree", timeout_hardness),
        ("child environment set equality", environment_isolation),
        ("run-folder artifacts complete and reproducible", run_folder_completeness),
        ("retrieval matches brute force", rag_oracle_equivalence),
        ("benchmark accounting", benchmark_accounting),
        ("token usage additivity", usage_additivity),
        ("offline generate end to end", end_to_end_generate),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let ms = started.elapsed().as_millis();
        match result {
            Ok(()) => println!("PASS [{:2}] {name} ({ms} ms)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{:2}] {name} ({ms} ms): {why}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
