//! Retrieval over a small tutorial corpus.
//!
//! Sources are preprocessed for headless use, chunked on line boundaries,
//! embedded, and kept in memory as unit vectors. Queries score by cosine
//! similarity (dot product of unit vectors) with an exhaustive scan; the
//! corpus is small enough that an approximate structure buys nothing.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chat::{ChatError, Embedder};
use crate::contracts::ContractRules;

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;
const EMBED_BATCH: usize = 64;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RagParams {
    pub enabled: bool,
    pub top_k: usize,
    pub score_threshold: f64,
    pub chunk_size_chars: usize,
    pub chunk_overlap_chars: usize,
    /// Corpus manifest used by `build-index`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_manifest: Option<PathBuf>,
    /// Snapshot written by `build-index` and loaded by runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_path: Option<PathBuf>,
}

impl Default for RagParams {
    fn default() -> Self {
        Self {
            enabled: false,
            top_k: 3,
            score_threshold: 0.25,
            chunk_size_chars: 2000,
            chunk_overlap_chars: 200,
            corpus_manifest: None,
            snapshot_path: None,
        }
    }
}

impl RagParams {
    pub(crate) fn check(&self) -> Result<(), String> {
        if self.top_k < 1 {
            return Err("top_k must be >= 1".into());
        }
        if !(-1.0..=1.0).contains(&self.score_threshold) {
            return Err("score_threshold must lie in [-1, 1]".into());
        }
        if self.chunk_size_chars == 0 {
            return Err("chunk_size_chars must be >= 1".into());
        }
        if self.chunk_overlap_chars >= self.chunk_size_chars {
            return Err("chunk_overlap_chars must be < chunk_size_chars".into());
        }
        Ok(())
    }

    /// The part of the params that shapes the index contents.
    fn fingerprint_material(&self) -> String {
        format!(
            "top_k={};threshold={};size={};overlap={}",
            self.top_k, self.score_threshold, self.chunk_size_chars, self.chunk_overlap_chars
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagChunk {
    pub source_id: String,
    pub ordinal: usize,
    pub text: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagIndex {
    pub chunks: Vec<RagChunk>,
    pub dimension: usize,
    pub corpus_fingerprint: String,
}

/// A retrieved chunk and its similarity to the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub source_id: String,
    pub ordinal: usize,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Error)]
pub enum RagError {
    #[error("embedding failed for source `{source_id}` chunks {first}..={last}: {error}")]
    Embedding {
        source_id: String,
        first: usize,
        last: usize,
        error: ChatError,
    },
    #[error("query embedding failed: {0}")]
    QueryEmbedding(ChatError),
    #[error("dimension mismatch: index has {index}, embedder produced {got}")]
    Dimension { index: usize, got: usize },
    #[error("zero-length embedding cannot be normalized")]
    ZeroVector,
    #[error("{path}: {reason}")]
    File { path: PathBuf, reason: String },
}

// ── Preprocessing ─────────────────────────────────────────────────────

fn is_magic(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with('%') || t.starts_with('!')
}

fn bracket_depth(line: &str) -> i64 {
    let mut depth = 0i64;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for c in line.chars() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '#' => break,
            '\'' | '"' => quote = Some(c),
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            _ => {}
        }
    }
    depth
}

/// Strip notebook magics and display-plotting statements so a tutorial runs
/// headless. Statements spanning several lines are removed whole; every
/// other line is kept in order.
pub fn preprocess_tutorial(source: &str, rules: &ContractRules) -> String {
    let display: Vec<_> = rules
        .compiled()
        .into_iter()
        .filter(|(rule, _, _)| *rule == crate::contracts::RULE_NO_DISPLAY)
        .map(|(_, _, re)| re)
        .collect();
    let mut out: Vec<&str> = Vec::new();
    let mut lines = source.split_inclusive('\n');
    while let Some(line) = lines.next() {
        if is_magic(line) {
            continue;
        }
        if display.iter().any(|re| re.is_match(line.trim_end_matches(['\n', '\r']))) {
            let mut depth = bracket_depth(line);
            while depth > 0 {
                match lines.next() {
                    Some(next) => depth += bracket_depth(next),
                    None => break,
                }
            }
            continue;
        }
        out.push(line);
    }
    out.concat()
}

// ── Chunking ──────────────────────────────────────────────────────────

/// Split `doc` into windows of at most `chunk_size_chars` characters where
/// each window after the first starts with the last `chunk_overlap_chars`
/// characters of its predecessor. Cuts land just after a newline when one
/// exists past the overlap region.
pub fn chunk(doc: &str, params: &RagParams) -> Vec<String> {
    let size = params.chunk_size_chars;
    let overlap = params.chunk_overlap_chars;
    assert!(overlap < size, "overlap must be smaller than chunk size");
    let chars: Vec<char> = doc.chars().collect();
    let n = chars.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        if n - start <= size {
            out.push(chars[start..].iter().collect());
            break;
        }
        let hard_end = start + size;
        // Latest newline whose cut still advances past the overlap.
        let end = (start + overlap..hard_end)
            .rev()
            .find(|&i| chars[i] == '\n')
            .map(|i| i + 1)
            .unwrap_or(hard_end);
        out.push(chars[start..end].iter().collect());
        start = end - overlap;
    }
    out
}

// ── Index ─────────────────────────────────────────────────────────────

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>, RagError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(RagError::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Digest of the ordered sources, the index-shaping params and the
/// embedder identity.
pub fn corpus_fingerprint(sources: &[(String, String)], params: &RagParams, embedder_id: &str) -> String {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(b"scriptloop-rag-v1");
    field(embedder_id.as_bytes());
    field(params.fingerprint_material().as_bytes());
    for (id, text) in sources {
        field(id.as_bytes());
        field(text.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Preprocess, chunk and embed `sources` in order.
pub fn build_index(
    sources: &[(String, String)],
    params: &RagParams,
    rules: &ContractRules,
    embedder: &dyn Embedder,
) -> Result<RagIndex, RagError> {
    let mut chunks = Vec::new();
    let mut dimension = 0;
    for (source_id, text) in sources {
        let pieces: Vec<String> = chunk(&preprocess_tutorial(text, rules), params)
            .into_iter()
            .filter(|c| !c.trim().is_empty())
            .collect();
        for (batch_no, batch) in pieces.chunks(EMBED_BATCH).enumerate() {
            let first = batch_no * EMBED_BATCH;
            let last = first + batch.len() - 1;
            let vectors = embedder.embed(batch).map_err(|error| RagError::Embedding {
                source_id: source_id.clone(),
                first,
                last,
                error,
            })?;
            for (offset, (text, vector)) in batch.iter().zip(vectors).enumerate() {
                if dimension == 0 {
                    dimension = vector.len();
                } else if vector.len() != dimension {
                    return Err(RagError::Dimension {
                        index: dimension,
                        got: vector.len(),
                    });
                }
                chunks.push(RagChunk {
                    source_id: source_id.clone(),
                    ordinal: first + offset,
                    text: text.clone(),
                    vector: normalize(vector)?,
                });
            }
        }
    }
    Ok(RagIndex {
        chunks,
        dimension,
        corpus_fingerprint: corpus_fingerprint(sources, params, &embedder.identity()),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scores are rounded to 12 decimals so that mathematically equal
/// similarities tie exactly and fall through to the id tie-break.
pub fn round_score(score: f64) -> f64 {
    (score * 1e12).round() / 1e12
}

/// Order: score descending, then `(source_id, ordinal)` ascending.
pub fn snippet_order(a: &Snippet, b: &Snippet) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.source_id.cmp(&b.source_id))
        .then_with(|| a.ordinal.cmp(&b.ordinal))
}

impl RagIndex {
    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Score every chunk against a query vector (normalized here).
    pub fn search(&self, query: Vec<f64>, top_k: usize, threshold: f64) -> Result<Vec<Snippet>, RagError> {
        if self.chunks.is_empty() {
            return Ok(Vec::new());
        }
        if query.len() != self.dimension {
            return Err(RagError::Dimension {
                index: self.dimension,
                got: query.len(),
            });
        }
        let q = normalize(query)?;
        let mut hits: Vec<Snippet> = self
            .chunks
            .iter()
            .map(|c| (c, round_score(dot(&c.vector, &q))))
            .filter(|(_, s)| *s >= threshold)
            .map(|(c, score)| Snippet {
                source_id: c.source_id.clone(),
                ordinal: c.ordinal,
                score,
                text: c.text.clone(),
            })
            .collect();
        hits.sort_by(snippet_order);
        hits.truncate(top_k);
        Ok(hits)
    }
}

/// Top-k chunks at or above the score threshold for `prompt`.
pub fn query(
    index: &RagIndex,
    prompt: &str,
    params: &RagParams,
    embedder: &dyn Embedder,
) -> Result<Vec<Snippet>, RagError> {
    if index.is_empty() {
        return Ok(Vec::new());
    }
    let mut vectors = embedder
        .embed(&[prompt.to_string()])
        .map_err(RagError::QueryEmbedding)?;
    let v = vectors.pop().ok_or(RagError::ZeroVector)?;
    index.search(v, params.top_k, params.score_threshold)
}

/// Render retrieved snippets as the reference-material user turn.
pub fn render_context(snippets: &[Snippet]) -> String {
    let mut text = String::from(
        "Reference material retrieved from the tutorials. Use it only where it helps; it is not part of the task.\n",
    );
    for s in snippets {
        text.push_str(&format!(
            "\n--- {} (chunk {}, score {:.3}) ---\n{}\n",
            s.source_id, s.ordinal, s.score, s.text
        ));
    }
    text
}

// ── Snapshot and corpus manifest ──────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format_version: u32,
    #[serde(flatten)]
    index: RagIndex,
}

pub fn save_snapshot(index: &RagIndex, path: &Path) -> Result<(), RagError> {
    let snap = Snapshot {
        format_version: SNAPSHOT_FORMAT_VERSION,
        index: index.clone(),
    };
    let text = serde_json::to_string(&snap).expect("index serializes");
    fs::write(path, text).map_err(|e| RagError::File {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_snapshot(path: &Path) -> Result<RagIndex, RagError> {
    let file_err = |reason: String| RagError::File {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
    let snap: Snapshot = serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))?;
    if snap.format_version != SNAPSHOT_FORMAT_VERSION {
        return Err(file_err(format!("unsupported format_version {}", snap.format_version)));
    }
    for c in &snap.index.chunks {
        let norm = dot(&c.vector, &c.vector).sqrt();
        if c.vector.len() != snap.index.dimension || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(file_err(format!(
                "chunk {}#{} is not a unit vector of dimension {}",
                c.source_id, c.ordinal, snap.index.dimension
            )));
        }
    }
    Ok(snap.index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub sources: Vec<CorpusEntry>,
}

/// Code cells of a notebook, joined in order.
fn notebook_code(text: &str) -> Result<String, String> {
    let nb: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let cells = nb
        .get("cells")
        .and_then(|c| c.as_array())
        .ok_or("notebook without cells")?;
    let mut out = String::new();
    for cell in cells {
        if cell.get("cell_type").and_then(|t| t.as_str()) != Some("code") {
            continue;
        }
        match cell.get("source") {
            Some(serde_json::Value::String(s)) => out.push_str(s),
            Some(serde_json::Value::Array(parts)) => {
                parts.iter().filter_map(|p| p.as_str()).for_each(|p| out.push_str(p))
            }
            _ => {}
        }
        if !out.ends_with('\n') {
            out.push('\n');
        }
    }
    Ok(out)
}

/// Read every source named by a corpus manifest, in manifest order.
/// Relative paths resolve against the manifest's directory.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<(String, String)>, RagError> {
    let err = |path: &Path, reason: String| RagError::File {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(manifest_path).map_err(|e| err(manifest_path, e.to_string()))?;
    let manifest: CorpusManifest = toml::from_str(&text).map_err(|e| err(manifest_path, e.to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for entry in manifest.sources {
        let (label, raw) = match (&entry.path, &entry.url) {
            (Some(p), None) => {
                let full = base.join(p);
                let raw = fs::read_to_string(&full).map_err(|e| err(&full, e.to_string()))?;
                (full, raw)
            }
            (None, Some(u)) => {
                let raw = reqwest::blocking::get(u)
                    .and_then(|r| r.error_for_status())
                    .and_then(|r| r.text())
                    .map_err(|e| err(manifest_path, format!("{u}: {e}")))?;
                (PathBuf::from(u), raw)
            }
            _ => {
                return Err(err(
                    manifest_path,
                    format!("source `{}` needs exactly one of path or url", entry.id),
                ))
            }
        };
        let body = if label.extension().is_some_and(|e| e == "ipynb") {
            notebook_code(&raw).map_err(|e| err(&label, e))?
        } else {
            raw
        };
        out.push((entry.id, body));
    }
    Ok(out)
}
