#![allow(dead_code)]

use std::sync::Arc;

use scriptloop::{ChatBackend, Config, ScriptedBackend, ScriptedReply, TokenUsage, ValidatorSpec};

pub fn fenced(code: &str) -> String {
    format!("Here is the script.\n\n```python\n{code}\n```\n")
}

pub const PASS_SCRIPT: &str = "print('N_OBS=4')";
pub const FAIL_SCRIPT: &str = "import nonexistent_module_xyz";

pub fn n_obs_validator() -> ValidatorSpec {
    ValidatorSpec::stdout_int("N_OBS", 4)
}

/// Config for offline runs: data root is an existing temp directory, no
/// persistence, short timeout.
pub fn offline_config(data_root: &std::path::Path) -> Config {
    let mut cfg = Config::default();
    cfg.env.data_root = data_root.to_path_buf();
    cfg.policy.persist = false;
    cfg.policy.exec_timeout_s = 20.0;
    cfg
}

/// Fails `k - 1` times with an import error, then passes.
pub fn fail_then_pass(k: u32, usage: impl Fn(u32) -> TokenUsage) -> Arc<dyn ChatBackend> {
    let replies = (1..=k)
        .map(|i| {
            let body = if i < k { FAIL_SCRIPT } else { PASS_SCRIPT };
            ScriptedReply::new(fenced(body)).with_usage(usage(i))
        })
        .collect();
    Arc::new(ScriptedBackend::sequence("scripted", replies))
}
