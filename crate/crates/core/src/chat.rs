//! Chat-completions client.
//!
//! Every higher layer talks to a [`ChatBackend`]. Two implementations ship:
//! [`HttpBackend`] for OpenAI-compatible servers and [`ScriptedBackend`],
//! which replays a fixed reply schedule in process and is what the offline
//! tests, the acceptance suite and the `scripted` config kind use.

use std::fmt;
use std::ops::{Add, AddAssign};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{BackendKind, BackendProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One conversation turn. Content is never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    role: Role,
    content: String,
}

impl Message {
    /// Empty content is replaced by a visible placeholder so the invariant
    /// holds even for blank model replies.
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        let mut content = content.into();
        if content.trim().is_empty() {
            content = "(empty)".to_string();
        }
        Self { role, content }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn content(&self) -> &str {
        &self.content
    }
}

/// Token accounting for one completion or an accumulated run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: u64,
    pub cached_input: u64,
    pub output: u64,
    pub reasoning: u64,
}

impl TokenUsage {
    pub fn new(input: u64, cached_input: u64, output: u64, reasoning: u64) -> Self {
        Self {
            input,
            cached_input,
            output,
            reasoning,
        }
    }

    /// `cached_input <= input` and `reasoning <= output`.
    pub fn is_consistent(&self) -> bool {
        self.cached_input <= self.input && self.reasoning <= self.output
    }
}

impl Add for TokenUsage {
    type Output = TokenUsage;

    fn add(self, rhs: Self) -> Self {
        TokenUsage {
            input: self.input + rhs.input,
            cached_input: self.cached_input + rhs.cached_input,
            output: self.output + rhs.output,
            reasoning: self.reasoning + rhs.reasoning,
        }
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(TokenUsage::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    /// Verbatim payload: the tool-call argument when the tool was honored,
    /// otherwise the message content.
    pub text: String,
    pub usage: TokenUsage,
    pub backend: String,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("credential variable `{0}` is not set")]
    Credential(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("backend setup: {0}")]
    Setup(String),
}

impl ChatError {
    /// Transport failures and server-side errors get one more try.
    pub fn is_retryable(&self) -> bool {
        match self {
            ChatError::Transport(_) => true,
            ChatError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// Anything that turns text into vectors.
pub trait Embedder: Send + Sync {
    /// Stable identity string; part of every index fingerprint.
    fn identity(&self) -> String;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ChatError>;
}

/// A chat-completions backend.
pub trait ChatBackend: Embedder {
    fn name(&self) -> &str;
    fn complete(
        &self,
        messages: &[Message],
        enforce_script_tool: bool,
    ) -> Result<CompletionResult, ChatError>;
}

/// Name of the function the model is asked to call with its script.
pub fn script_tool_name(language: &str) -> String {
    format!("return_{}", language.to_ascii_lowercase())
}

fn check_conversation(messages: &[Message]) -> Result<(), ChatError> {
    let systems = messages.iter().filter(|m| m.role == Role::System).count();
    if messages.first().map(|m| m.role) != Some(Role::System) || systems != 1 {
        return Err(ChatError::InvalidRequest(
            "conversation must begin with exactly one system message".into(),
        ));
    }
    Ok(())
}

fn check_embed_input(texts: &[String]) -> Result<(), ChatError> {
    if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
        return Err(ChatError::InvalidRequest(
            "embedding input must be a non-empty list of non-empty texts".into(),
        ));
    }
    Ok(())
}

fn check_dimensions(vectors: &[Vec<f64>]) -> Result<(), ChatError> {
    if let Some(first) = vectors.first() {
        if let Some(bad) = vectors.iter().find(|v| v.len() != first.len()) {
            return Err(ChatError::Dimension {
                expected: first.len(),
                got: bad.len(),
            });
        }
    }
    Ok(())
}

// ── HTTP ──────────────────────────────────────────────────────────────

/// Client for an OpenAI-compatible chat-completions server.
pub struct HttpBackend {
    profile: BackendProfile,
    language: String,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("name", &self.profile.name)
            .field("base_url", &self.profile.base_url.as_str())
            .finish()
    }
}

const BODY_EXCERPT_CHARS: usize = 512;

impl HttpBackend {
    pub fn new(profile: BackendProfile, language: &str) -> Result<Self, ChatError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(profile.request_timeout_s))
            .build()
            .map_err(|e| ChatError::Setup(e.to_string()))?;
        Ok(Self {
            profile,
            language: language.to_string(),
            client,
        })
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.profile.base_url.as_str().trim_end_matches('/'), path)
    }

    fn api_key(&self) -> Result<Option<String>, ChatError> {
        match &self.profile.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| ChatError::Credential(var.clone())),
        }
    }

    /// Build the JSON request body for a completion.
    pub fn completion_request(&self, messages: &[Message], enforce_script_tool: bool) -> Value {
        let wire: Vec<Value> = messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": self.profile.model_id,
            "messages": wire,
        });
        set_dotted(
            &mut body,
            &self.profile.effort_field,
            json!(self.profile.reasoning_effort.as_str()),
        );
        if enforce_script_tool {
            let tool = script_tool_name(&self.language);
            body["tools"] = json!([{
                "type": "function",
                "function": {
                    "name": tool,
                    "description": format!(
                        "Return one complete {} script. The argument is the raw source \
                         without backticks or prose.",
                        self.language
                    ),
                    "parameters": {
                        "type": "object",
                        "properties": {"code": {"type": "string"}},
                        "required": ["code"],
                        "additionalProperties": false
                    }
                }
            }]);
            body["tool_choice"] = json!({"type": "function", "function": {"name": tool}});
        }
        body
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, ChatError> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = self.api_key()? {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                ChatError::Timeout(Duration::from_secs_f64(self.profile.request_timeout_s))
            } else {
                ChatError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ChatError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ChatError::Http {
                status: status.as_u16(),
                body: text.chars().take(BODY_EXCERPT_CHARS).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| ChatError::Malformed(format!("not JSON: {e}")))
    }

    /// One automatic retry on transport failures and 5xx; 4xx is terminal.
    fn post(&self, url: &str, body: &Value) -> Result<Value, ChatError> {
        match self.post_once(url, body) {
            Err(e) if e.is_retryable() => {
                tracing::warn!(backend = %self.profile.name, error = %e, "retrying request");
                self.post_once(url, body)
            }
            other => other,
        }
    }
}

fn set_dotted(target: &mut Value, path: &str, value: Value) {
    let mut cur = target;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            cur[*part] = value;
            return;
        }
        if !cur[*part].is_object() {
            cur[*part] = json!({});
        }
        cur = &mut cur[*part];
    }
}

fn count(v: &Value, paths: &[&str]) -> Result<u64, ChatError> {
    for path in paths {
        let mut cur = v;
        let mut found = true;
        for part in path.split('.') {
            match cur.get(part) {
                Some(next) => cur = next,
                None => {
                    found = false;
                    break;
                }
            }
        }
        if found && !cur.is_null() {
            return cur
                .as_u64()
                .ok_or_else(|| ChatError::Malformed(format!("usage field `{path}` is not a count")));
        }
    }
    Ok(0)
}

/// Parse a usage block. Missing fields count as zero; inconsistent totals
/// are rejected.
pub fn parse_usage(usage: Option<&Value>) -> Result<TokenUsage, ChatError> {
    let Some(u) = usage.filter(|u| !u.is_null()) else {
        return Ok(TokenUsage::default());
    };
    let parsed = TokenUsage {
        input: count(u, &["prompt_tokens", "input_tokens"])?,
        cached_input: count(
            u,
            &[
                "prompt_tokens_details.cached_tokens",
                "input_tokens_details.cached_tokens",
            ],
        )?,
        output: count(u, &["completion_tokens", "output_tokens"])?,
        reasoning: count(
            u,
            &[
                "completion_tokens_details.reasoning_tokens",
                "output_tokens_details.reasoning_tokens",
            ],
        )?,
    };
    if !parsed.is_consistent() {
        return Err(ChatError::Malformed(format!(
            "inconsistent usage: {parsed:?} (cached > input or reasoning > output)"
        )));
    }
    Ok(parsed)
}

/// Extract the payload and usage from a chat-completions response body.
pub fn parse_completion(body: &Value, tool_name: Option<&str>) -> Result<(String, TokenUsage), ChatError> {
    let usage = parse_usage(body.get("usage"))?;
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| ChatError::Malformed("missing choices[0].message".into()))?;
    if let Some(tool) = tool_name {
        let calls = message.get("tool_calls").and_then(Value::as_array);
        if let Some(call) = calls
            .into_iter()
            .flatten()
            .find(|c| c.pointer("/function/name").and_then(Value::as_str) == Some(tool))
        {
            let args = call
                .pointer("/function/arguments")
                .and_then(Value::as_str)
                .ok_or_else(|| ChatError::Malformed("tool call without arguments".into()))?;
            let args: Value = serde_json::from_str(args)
                .map_err(|e| ChatError::Malformed(format!("tool arguments are not JSON: {e}")))?;
            let code = args
                .get("code")
                .and_then(Value::as_str)
                .ok_or_else(|| ChatError::Malformed("tool arguments lack `code`".into()))?;
            return Ok((code.to_string(), usage));
        }
    }
    // Fallback: backend ignored the tool; the contracts layer extracts the
    // fenced block from plain content.
    match message.get("content") {
        Some(Value::String(s)) => Ok((s.clone(), usage)),
        Some(Value::Null) | None => Ok((String::new(), usage)),
        Some(_) => Err(ChatError::Malformed("message content is not a string".into())),
    }
}

/// Extract embeddings from an embeddings response, restoring input order.
pub fn parse_embeddings(body: &Value, expected: usize) -> Result<Vec<Vec<f64>>, ChatError> {
    let data = body
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| ChatError::Malformed("missing `data` array".into()))?;
    if data.len() != expected {
        return Err(ChatError::Malformed(format!(
            "expected {expected} embeddings, got {}",
            data.len()
        )));
    }
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; expected];
    for (pos, item) in data.iter().enumerate() {
        let idx = item
            .get("index")
            .and_then(Value::as_u64)
            .map(|i| i as usize)
            .unwrap_or(pos);
        let vec = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| ChatError::Malformed("embedding item without vector".into()))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| ChatError::Malformed("non-numeric embedding component".into()))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let slot = slots
            .get_mut(idx)
            .ok_or_else(|| ChatError::Malformed(format!("embedding index {idx} out of range")))?;
        *slot = Some(vec);
    }
    let vectors: Vec<Vec<f64>> = slots
        .into_iter()
        .map(|s| s.ok_or_else(|| ChatError::Malformed("duplicate embedding index".into())))
        .collect::<Result<_, _>>()?;
    check_dimensions(&vectors)?;
    Ok(vectors)
}

impl Embedder for HttpBackend {
    fn identity(&self) -> String {
        format!(
            "http:{}:{}",
            self.profile.base_url, self.profile.embedding_model_id
        )
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ChatError> {
        check_embed_input(texts)?;
        let body = json!({"model": self.profile.embedding_model_id, "input": texts});
        let resp = self.post(&self.endpoint("embeddings"), &body)?;
        parse_embeddings(&resp, texts.len())
    }
}

impl ChatBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.profile.name
    }

    fn complete(
        &self,
        messages: &[Message],
        enforce_script_tool: bool,
    ) -> Result<CompletionResult, ChatError> {
        check_conversation(messages)?;
        let started = Instant::now();
        let body = self.completion_request(messages, enforce_script_tool);
        let resp = self.post(&self.endpoint("chat/completions"), &body)?;
        let tool = enforce_script_tool.then(|| script_tool_name(&self.language));
        let (text, usage) = parse_completion(&resp, tool.as_deref())?;
        Ok(CompletionResult {
            text,
            usage,
            backend: self.profile.name.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

// ── Deterministic embedder ────────────────────────────────────────────

/// Feature-hashing embedder: each lowercase alphanumeric token adds ±1 to a
/// bucket chosen by its SHA-256 digest. Deterministic and offline.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self { dimension }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let lowered = text.to_lowercase();
        let mut tokens: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric() && c != '_')
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            tokens.push(&lowered);
        }
        for tok in tokens {
            let digest = Sha256::digest(tok.as_bytes());
            let bucket = u64::from_le_bytes(digest[..8].try_into().unwrap()) as usize % self.dimension;
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        if v.iter().all(|x| *x == 0.0) {
            // Cancellation left nothing; fall back to a fixed axis.
            v[0] = 1.0;
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn identity(&self) -> String {
        format!("hash-sha256:{}", self.dimension)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ChatError> {
        check_embed_input(texts)?;
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

// ── Scripted backend ──────────────────────────────────────────────────

/// One canned completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedReply {
    pub text: String,
    #[serde(default)]
    pub usage: TokenUsage,
}

impl ScriptedReply {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: TokenUsage::default(),
        }
    }

    pub fn with_usage(mut self, usage: TokenUsage) -> Self {
        self.usage = usage;
        self
    }
}

/// A reply schedule selected by a substring of the user turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedRoute {
    /// Matches when any user turn contains this text; `None` matches all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when_prompt_contains: Option<String>,
    pub replies: Vec<ScriptedReply>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    #[serde(default = "default_embedding_dim")]
    embedding_dimension: usize,
    routes: Vec<ScriptedRoute>,
}

fn default_embedding_dim() -> usize {
    64
}

/// Replays canned replies. The reply for a request is chosen by how many
/// assistant turns the conversation already holds, so the backend keeps no
/// state and concurrent runs never interfere. Past the end of a schedule the
/// last reply repeats.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    name: String,
    routes: Vec<ScriptedRoute>,
    embedder: HashEmbedder,
}

impl ScriptedBackend {
    pub fn new(name: impl Into<String>, routes: Vec<ScriptedRoute>) -> Self {
        Self {
            name: name.into(),
            routes,
            embedder: HashEmbedder::new(default_embedding_dim()),
        }
    }

    /// Single schedule used for every prompt.
    pub fn sequence(name: impl Into<String>, replies: Vec<ScriptedReply>) -> Self {
        Self::new(
            name,
            vec![ScriptedRoute {
                when_prompt_contains: None,
                replies,
            }],
        )
    }

    pub fn with_embedding_dimension(mut self, dimension: usize) -> Self {
        self.embedder = HashEmbedder::new(dimension);
        self
    }

    /// Load a reply schedule from a TOML or JSON file.
    pub fn from_file(name: &str, path: &Path) -> Result<Self, ChatError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ChatError::Setup(format!("{}: {e}", path.display())))?;
        let file: ScriptFile = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ChatError::Setup(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| ChatError::Setup(e.to_string()))?
        };
        if file.routes.iter().any(|r| r.replies.is_empty()) || file.embedding_dimension == 0 {
            return Err(ChatError::Setup(format!(
                "{}: every route needs at least one reply and the dimension must be positive",
                path.display()
            )));
        }
        Ok(Self::new(name, file.routes).with_embedding_dimension(file.embedding_dimension))
    }
}

impl Embedder for ScriptedBackend {
    fn identity(&self) -> String {
        self.embedder.identity()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ChatError> {
        self.embedder.embed(texts)
    }
}

impl ChatBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, messages: &[Message], _enforce: bool) -> Result<CompletionResult, ChatError> {
        check_conversation(messages)?;
        let route = self
            .routes
            .iter()
            .find(|r| match &r.when_prompt_contains {
                None => true,
                Some(needle) => messages
                    .iter()
                    .any(|m| m.role == Role::User && m.content.contains(needle.as_str())),
            })
            .ok_or_else(|| ChatError::Malformed("no scripted route matches this prompt".into()))?;
        let turn = messages.iter().filter(|m| m.role == Role::Assistant).count();
        let reply = route
            .replies
            .get(turn)
            .or_else(|| route.replies.last())
            .ok_or_else(|| ChatError::Malformed("scripted route has no replies".into()))?;
        if !reply.usage.is_consistent() {
            return Err(ChatError::Malformed(format!(
                "inconsistent usage: {:?}",
                reply.usage
            )));
        }
        Ok(CompletionResult {
            text: reply.text.clone(),
            usage: reply.usage,
            backend: self.name.clone(),
            latency_ms: 0,
        })
    }
}

/// Instantiate the backend described by a profile.
pub fn connect(profile: &BackendProfile, language: &str) -> Result<Arc<dyn ChatBackend>, ChatError> {
    match profile.kind {
        BackendKind::OpenaiCompatible => Ok(Arc::new(HttpBackend::new(profile.clone(), language)?)),
        BackendKind::Scripted => {
            let path = profile
                .script_file
                .as_ref()
                .ok_or_else(|| ChatError::Setup("scripted backend without script_file".into()))?;
            Ok(Arc::new(ScriptedBackend::from_file(&profile.name, path)?))
        }
    }
}
