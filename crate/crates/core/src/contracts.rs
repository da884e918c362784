//! Output contracts: the governed system message, single-script extraction,
//! textual linting of forbidden calls, and repair-turn composition.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chat::Message;
use crate::config::{EnvSpec, DEFAULT_PUBLISHED_VAR, LEGACY_DATA_VAR};
use crate::sandbox::ExecutionResult;

/// Version of the built-in system message text.
pub const SYSTEM_MESSAGE_VERSION: u32 = 1;

pub const RULE_NO_DISPLAY: &str = "no-display-plot";
pub const RULE_NO_TARGET_NAME: &str = "no-target-name";

/// Default traceback tail length fed back to the model.
pub const DEFAULT_TAIL_LINES: usize = 15;

const FENCE: &str = "```";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractRules {
    /// Scripting language of the generated code; also the expected fence tag.
    pub language: String,
    /// Regexes for display-plotting calls.
    pub forbidden_call_patterns: Vec<String>,
    /// Regexes for forbidden observation selectors.
    pub forbidden_selector_patterns: Vec<String>,
    /// Variable names accepted as the data pointer.
    pub data_env_names: Vec<String>,
    pub extra_rules_text: Vec<String>,
    /// Repair hints keyed by exception class.
    pub hints: BTreeMap<String, Vec<String>>,
    pub tail_lines: usize,
}

impl Default for ContractRules {
    fn default() -> Self {
        let hint = |k: &str, v: &str| (k.to_string(), vec![v.to_string()]);
        Self {
            language: "python".into(),
            forbidden_call_patterns: vec![
                r"\bplt\.show\s*\(".into(),
                r"\bpyplot\.show\s*\(".into(),
                r"\.peek\s*\(".into(),
                r"^\s*display\s*\(".into(),
            ],
            forbidden_selector_patterns: vec![r"\bTARGET_NAME\b".into()],
            data_env_names: vec![DEFAULT_PUBLISHED_VAR.into(), LEGACY_DATA_VAR.into()],
            extra_rules_text: vec!["Prefer current Gammapy idioms and APIs.".into()],
            hints: BTreeMap::from([
                hint(
                    "ModuleNotFoundError",
                    "Import all requirements and use only packages available in the environment.",
                ),
                hint(
                    "ImportError",
                    "Import all requirements and use only packages available in the environment.",
                ),
                hint("NameError", "Define or import every name before using it."),
                hint(
                    "FileNotFoundError",
                    "Resolve every data path through the PHOTON_STORAGE environment variable.",
                ),
                hint(
                    "Timeout",
                    "The script exceeded the time limit; reduce the amount of work it does.",
                ),
                hint(
                    "MultipleCodeBlocks",
                    "Return exactly one code block containing the complete script.",
                ),
                hint(
                    "NoCodeBlock",
                    "Return exactly one code block containing the complete script, with no prose.",
                ),
                hint(
                    "ContractViolation",
                    "Remove every construct flagged above; the script must run headless and non-interactively.",
                ),
                hint(
                    "ValidationFailed",
                    "The script ran but its printed results did not pass the checks; print each result as KEY=value on its own line.",
                ),
            ]),
            tail_lines: DEFAULT_TAIL_LINES,
        }
    }
}

impl ContractRules {
    pub(crate) fn check(&self, env: &EnvSpec) -> Result<(), String> {
        if self.language.trim().is_empty() {
            return Err("language must not be empty".into());
        }
        for p in self
            .forbidden_call_patterns
            .iter()
            .chain(&self.forbidden_selector_patterns)
        {
            Regex::new(p).map_err(|e| format!("bad pattern `{p}`: {e}"))?;
        }
        if !self.data_env_names.contains(&env.published_var) {
            return Err(format!(
                "data_env_names must include the published variable `{}`",
                env.published_var
            ));
        }
        if self.tail_lines == 0 {
            return Err("tail_lines must be >= 1".into());
        }
        Ok(())
    }

    /// Compiled patterns tagged with their rule id. Invalid patterns are
    /// skipped (config validation rejects them earlier).
    pub fn compiled(&self) -> Vec<(&'static str, String, Regex)> {
        let tag = |rule: &'static str, pats: &[String]| {
            pats.iter()
                .filter_map(move |p| Regex::new(p).ok().map(|r| (rule, p.clone(), r)))
                .collect::<Vec<_>>()
        };
        let mut out = tag(RULE_NO_DISPLAY, &self.forbidden_call_patterns);
        out.extend(tag(RULE_NO_TARGET_NAME, &self.forbidden_selector_patterns));
        out
    }

    pub fn hints_for(&self, exception_class: &str) -> Vec<String> {
        self.hints.get(exception_class).cloned().unwrap_or_default()
    }
}

/// One extracted script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptSource {
    pub text: String,
    pub language_tag: String,
    pub content_hash: String,
}

impl ScriptSource {
    pub fn new(text: impl Into<String>, language_tag: impl Into<String>) -> Self {
        let text = text.into();
        let content_hash = hex::encode(Sha256::digest(text.as_bytes()));
        Self {
            text,
            language_tag: language_tag.into(),
            content_hash,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_id: String,
    pub pattern: String,
    pub line: usize,
    pub excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("reply contains no code block")]
    NoCodeBlock,
    #[error("reply contains {0} code blocks; exactly one is required")]
    MultipleCodeBlocks(usize),
    #[error("code block is tagged `{found}`, expected `{expected}`")]
    TagConflict { expected: String, found: String },
    #[error("code block is empty")]
    EmptyScript,
}

impl ExtractError {
    /// Class name reported in traces and used to select hints.
    pub fn class(&self) -> &'static str {
        match self {
            ExtractError::NoCodeBlock => "NoCodeBlock",
            ExtractError::MultipleCodeBlocks(_) => "MultipleCodeBlocks",
            ExtractError::TagConflict { .. } => "FenceTagMismatch",
            ExtractError::EmptyScript => "EmptyScript",
        }
    }
}

/// Deterministic system message covering every rule family.
pub fn build_system_message(rules: &ContractRules) -> Message {
    let lang = &rules.language;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "You write complete, runnable {lang} analysis scripts. Follow these rules without exception."
    );
    let _ = writeln!(text);
    let mut n = 0;
    let mut rule = |text: &mut String, body: String| {
        n += 1;
        let _ = writeln!(text, "{n}. {body}");
    };
    rule(
        &mut text,
        format!(
            "Return exactly one complete {lang} script in a single code block. Do not add prose or explanations."
        ),
    );
    rule(
        &mut text,
        "Import all requirements at the top of the script. Avoid interactive plotting and never call plotting display functions.".into(),
    );
    if !rules.forbidden_call_patterns.is_empty() {
        rule(
            &mut text,
            format!(
                "Forbidden display calls (matched textually): {}.",
                backticked(&rules.forbidden_call_patterns)
            ),
        );
    }
    rule(
        &mut text,
        format!(
            "Do not select observations via TARGET_NAME; select by sky position or observation id instead. Forbidden selectors (matched textually): {}.",
            backticked(&rules.forbidden_selector_patterns)
        ),
    );
    let names: Vec<String> = rules.data_env_names.iter().map(|n| format!("`{n}`")).collect();
    rule(
        &mut text,
        format!(
            "Locate all input data through the environment variable {}; do not hard-code data paths. Accepted variable names: {}.",
            names.first().cloned().unwrap_or_default(),
            names.join(", ")
        ),
    );
    rule(
        &mut text,
        "The script runs headless and offline with a time limit. Print every requested result to stdout as KEY=value on its own line.".into(),
    );
    for extra in &rules.extra_rules_text {
        rule(&mut text, extra.clone());
    }
    Message::system(text.trim_end().to_string())
}

fn backticked(items: &[String]) -> String {
    items
        .iter()
        .map(|p| format!("`{p}`"))
        .collect::<Vec<_>>()
        .join(", ")
}

struct Block {
    tag: String,
    body: String,
    /// False for a fence left open at the end of the reply.
    closed: bool,
}

/// Byte offset just past the end of each line, paired with the line.
fn lines_with_offsets(text: &str) -> Vec<(usize, usize, &str)> {
    let mut out = Vec::new();
    let mut start = 0;
    for segment in text.split_inclusive('\n') {
        let end = start + segment.len();
        let line = segment.strip_suffix('\n').unwrap_or(segment);
        let line = line.strip_suffix('\r').unwrap_or(line);
        out.push((start, end, line));
        start = end;
    }
    out
}

fn fenced_blocks(text: &str) -> Vec<Block> {
    let mut blocks = Vec::new();
    let lines = lines_with_offsets(text);
    let mut i = 0;
    while i < lines.len() {
        let (_, open_end, line) = lines[i];
        let trimmed = line.trim_start();
        if let Some(tag) = trimmed.strip_prefix(FENCE) {
            let tag = tag.trim().to_string();
            // Body spans from after the opening line to just before the
            // newline preceding the closing fence.
            let mut j = i + 1;
            while j < lines.len() && !lines[j].2.trim_start().starts_with(FENCE) {
                j += 1;
            }
            // a fence left open is a truncated reply; it still counts
            // towards the block total but is never run
            if j == lines.len() {
                blocks.push(Block {
                    tag,
                    body: text[open_end.min(text.len())..].to_string(),
                    closed: false,
                });
                break;
            }
            let close_start = lines[j].0;
            let mut end = close_start.saturating_sub(1).max(open_end);
            if end > open_end && text.as_bytes()[end - 1] == b'\r' {
                end -= 1;
            }
            let body = &text[open_end..end];
            blocks.push(Block {
                tag,
                body: body.to_string(),
                closed: true,
            });
            i = j + 1;
        } else {
            i += 1;
        }
    }
    blocks
}

fn plausible_statement(line: &str) -> bool {
    use std::sync::OnceLock;
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(
            r#"(?x)^\s*(?:
                \#                                           # comment
              | (?:import|from)\s+[A-Za-z_]                  # import
              | (?:def|class|for|while|if|elif|with|try|except|finally|else|return|raise|assert|del|pass|break|continue|global|nonlocal|async|await|yield|lambda)\b
              | @[A-Za-z_]                                   # decorator
              | [A-Za-z_][\w\.\[\]'",\s\*]*?\s*(?:[-+*/%&|^@]|//|\*\*|>>|<<)?=[^=]   # assignment
              | [A-Za-z_][\w\.]*(?:\[[^\]]*\])*\s*\(         # call
              | [\)\]\}]                                     # closing bracket
              | ["'].*["'],?\s*$                             # literal continuation
              | \d
            )"#,
        )
        .expect("statement regex")
    });
    re.is_match(line)
}

/// Whether unfenced text reads as code rather than prose: at least half of
/// the non-blank lines must look like statements.
pub fn looks_like_script(text: &str) -> bool {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return false;
    }
    let plausible = lines.iter().filter(|l| plausible_statement(l)).count();
    plausible * 2 >= lines.len()
}

/// Extract the single script from a model reply.
///
/// A reply without fences is accepted whole when it looks like code (the
/// tool path returns bare scripts). A fenced reply must hold exactly one
/// block whose tag is empty or equals `expected_tag`. A fence left open at
/// the end counts as a block but is never accepted.
pub fn extract_script(completion_text: &str, expected_tag: &str) -> Result<ScriptSource, ExtractError> {
    let blocks = fenced_blocks(completion_text);
    match blocks.len() {
        0 => {
            if completion_text.contains(FENCE) || !looks_like_script(completion_text) {
                return Err(ExtractError::NoCodeBlock);
            }
            Ok(ScriptSource::new(completion_text, expected_tag))
        }
        1 if !blocks[0].closed => Err(ExtractError::NoCodeBlock),
        1 => {
            let block = &blocks[0];
            if !block.tag.is_empty() && !block.tag.eq_ignore_ascii_case(expected_tag) {
                return Err(ExtractError::TagConflict {
                    expected: expected_tag.to_string(),
                    found: block.tag.clone(),
                });
            }
            if block.body.trim().is_empty() {
                return Err(ExtractError::EmptyScript);
            }
            Ok(ScriptSource::new(block.body.clone(), expected_tag))
        }
        n => Err(ExtractError::MultipleCodeBlocks(n)),
    }
}

/// Report every occurrence of a forbidden pattern with its 1-based line.
pub fn lint_contracts(script: &ScriptSource, rules: &ContractRules) -> Vec<Violation> {
    let compiled = rules.compiled();
    let mut out = Vec::new();
    for (idx, line) in script.text.lines().enumerate() {
        for (rule, pattern, re) in &compiled {
            for m in re.find_iter(line) {
                out.push(Violation {
                    rule_id: rule.to_string(),
                    pattern: pattern.clone(),
                    line: idx + 1,
                    excerpt: m.as_str().to_string(),
                });
            }
        }
    }
    out.sort_by_key(|v| v.line);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureSummary {
    pub exception_class: String,
    pub tail: String,
}

impl FailureSummary {
    pub fn new(exception_class: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            exception_class: exception_class.into(),
            tail: tail.into(),
        }
    }
}

/// Last `max_lines` lines of `text`.
pub fn tail_lines(text: &str, max_lines: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let from = lines.len().saturating_sub(max_lines);
    lines[from..].join("\n")
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Parse `Class: message` (or a bare exception name) from one unindented
/// line, returning the last segment of a dotted class path.
pub fn parse_exception_line(line: &str) -> Option<&str> {
    if line.starts_with(char::is_whitespace) {
        return None;
    }
    let line = line.trim_end();
    let (head, has_message) = match line.find(':') {
        Some(i) => (&line[..i], true),
        None => (line, false),
    };
    let segments: Vec<&str> = head.split('.').collect();
    if segments.iter().any(|s| !is_identifier(s)) {
        return None;
    }
    let class = *segments.last()?;
    let named_like_exception = ["Error", "Exception", "Interrupt", "Exit", "Iteration", "Warning"]
        .iter()
        .any(|suffix| class.ends_with(suffix));
    (has_message || named_like_exception).then_some(class)
}

/// Condense a failed execution into its exception class and stderr tail.
pub fn summarize_failure(exec: &ExecutionResult, max_lines: usize) -> FailureSummary {
    let tail = tail_lines(&exec.stderr, max_lines);
    if exec.timed_out {
        return FailureSummary::new("Timeout", tail);
    }
    if exec.cancelled {
        return FailureSummary::new("Cancelled", tail);
    }
    let class = exec
        .stderr
        .lines()
        .rev()
        .filter(|l| !l.trim().is_empty())
        .find_map(parse_exception_line)
        .unwrap_or("Unknown");
    FailureSummary::new(class, tail)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("a repair message needs a failure summary or at least one violation")]
pub struct EmptyRepair;

/// Compose the user turn that asks the model to fix its previous script.
pub fn build_repair_message(
    summary: Option<&FailureSummary>,
    violations: &[Violation],
    hints: &[String],
) -> Result<Message, EmptyRepair> {
    if summary.is_none() && violations.is_empty() {
        return Err(EmptyRepair);
    }
    let mut text = String::from("The previous script did not pass.\n");
    if let Some(s) = summary {
        let _ = writeln!(text, "\nException class: {}", s.exception_class);
        if !s.tail.is_empty() {
            let _ = writeln!(text, "Output tail:\n{}", s.tail);
        }
    }
    if !violations.is_empty() {
        let _ = writeln!(text, "\nContract violations:");
        for v in violations {
            let _ = writeln!(text, "- {} at line {}: `{}`", v.rule_id, v.line, v.excerpt);
        }
    }
    if !hints.is_empty() {
        let _ = writeln!(text, "\nHints:");
        for h in hints {
            let _ = writeln!(text, "- {h}");
        }
    }
    text.push_str("\nReturn the complete corrected script as exactly one code block.");
    Ok(Message::user(text))
}
