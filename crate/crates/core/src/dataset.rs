//! Manifest-driven dataset download into the data root.

use std::fs;
use std::io::Write as _;
use std::path::{Component, Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use url::Url;

/// Sample manifest for the H.E.S.S. DL3 DR1 public test data.
pub const HESS_DL3_DR1_MANIFEST: &str = include_str!("../resources/hess-dl3-dr1.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub url: Url,
    pub relative_path: PathBuf,
    /// Lowercase hex SHA-256 of the file content.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(default)]
    pub entries: Vec<DatasetEntry>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("entry path `{0}` escapes the data root")]
    UnsafePath(PathBuf),
    #[error("entry url `{0}` is not http(s) or file")]
    UnsupportedUrl(Url),
    #[error("digest `{0}` is not 64 hex characters")]
    BadDigest(String),
}

impl DatasetManifest {
    pub fn from_toml(text: &str) -> Result<Self, ManifestError> {
        let manifest: DatasetManifest = toml::from_str(text).map_err(|e| ManifestError::Schema(e.to_string()))?;
        manifest.check()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn sample() -> Self {
        Self::from_toml(HESS_DL3_DR1_MANIFEST).expect("shipped manifest is valid")
    }

    pub fn check(&self) -> Result<(), ManifestError> {
        if self.name.trim().is_empty() {
            return Err(ManifestError::Schema("name must be non-empty".into()));
        }
        for entry in &self.entries {
            if !is_contained(&entry.relative_path) {
                return Err(ManifestError::UnsafePath(entry.relative_path.clone()));
            }
            if !matches!(entry.url.scheme(), "http" | "https" | "file") {
                return Err(ManifestError::UnsupportedUrl(entry.url.clone()));
            }
            if let Some(d) = &entry.content_digest {
                if d.len() != 64 || !d.bytes().all(|b| b.is_ascii_hexdigit()) {
                    return Err(ManifestError::BadDigest(d.clone()));
                }
            }
        }
        Ok(())
    }
}

/// True when the path is relative, non-empty, and has no `..` or root parts.
pub fn is_contained(path: &Path) -> bool {
    let mut any = false;
    for c in path.components() {
        match c {
            Component::Normal(_) => any = true,
            Component::CurDir => {}
            _ => return false,
        }
    }
    any
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedEntry {
    pub relative_path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchSummary {
    pub downloaded: usize,
    pub skipped: usize,
    pub failed: Vec<FailedEntry>,
}

#[derive(Debug, Clone)]
pub struct FetchOptions {
    pub force: bool,
    pub parallelism: usize,
    pub timeout: Duration,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            force: false,
            parallelism: 4,
            timeout: Duration::from_secs(600),
        }
    }
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("data root {path} is not writable: {source}")]
    DataRoot {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot build http client: {0}")]
    Client(String),
}

enum EntryOutcome {
    Downloaded,
    Skipped,
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn fetch_bytes(client: &reqwest::blocking::Client, url: &Url) -> Result<Vec<u8>, String> {
    if url.scheme() == "file" {
        let path = url.to_file_path().map_err(|_| format!("bad file url {url}"))?;
        return fs::read(&path).map_err(|e| format!("{}: {e}", path.display()));
    }
    let response = client.get(url.as_str()).send().map_err(|e| e.to_string())?;
    let status = response.status();
    if !status.is_success() {
        return Err(format!("HTTP {status}"));
    }
    response.bytes().map(|b| b.to_vec()).map_err(|e| e.to_string())
}

fn fetch_entry(
    client: &reqwest::blocking::Client,
    entry: &DatasetEntry,
    root: &Path,
    force: bool,
) -> Result<EntryOutcome, String> {
    let target = root.join(&entry.relative_path);
    if !force && target.is_file() {
        match &entry.content_digest {
            None => return Ok(EntryOutcome::Skipped),
            Some(want) => {
                if sha256_file(&target).map_err(|e| e.to_string())?.eq_ignore_ascii_case(want) {
                    return Ok(EntryOutcome::Skipped);
                }
            }
        }
    }
    let bytes = fetch_bytes(client, &entry.url)?;
    if let Some(want) = &entry.content_digest {
        let got = hex::encode(Sha256::digest(&bytes));
        if !got.eq_ignore_ascii_case(want) {
            // never leave a stale file that claims to be this entry
            let _ = fs::remove_file(&target);
            return Err(format!("digest mismatch: expected {want}, got {got}"));
        }
    }
    let parent = target.parent().unwrap_or(root);
    fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| e.to_string())?;
    tmp.write_all(&bytes).map_err(|e| e.to_string())?;
    tmp.as_file().sync_all().map_err(|e| e.to_string())?;
    tmp.persist(&target).map_err(|e| e.to_string())?;
    Ok(EntryOutcome::Downloaded)
}

/// Download every entry under `root`. Per-entry failures are collected in
/// the summary; only an unusable data root aborts the batch.
pub fn fetch(manifest: &DatasetManifest, root: &Path, options: &FetchOptions) -> Result<FetchSummary, FetchError> {
    fs::create_dir_all(root).map_err(|source| FetchError::DataRoot {
        path: root.to_path_buf(),
        source,
    })?;
    tempfile::NamedTempFile::new_in(root).map_err(|source| FetchError::DataRoot {
        path: root.to_path_buf(),
        source,
    })?;
    let client = reqwest::blocking::Client::builder()
        .timeout(options.timeout)
        .build()
        .map_err(|e| FetchError::Client(e.to_string()))?;

    let queue = Mutex::new(manifest.entries.iter().enumerate());
    let outcomes = Mutex::new(Vec::with_capacity(manifest.entries.len()));
    std::thread::scope(|scope| {
        for _ in 0..options.parallelism.max(1) {
            scope.spawn(|| loop {
                let Some((i, entry)) = queue.lock().unwrap().next() else {
                    break;
                };
                let outcome = fetch_entry(&client, entry, root, options.force);
                outcomes.lock().unwrap().push((i, outcome));
            });
        }
    });
    let mut outcomes = outcomes.into_inner().unwrap();
    outcomes.sort_by_key(|(i, _)| *i);

    let mut summary = FetchSummary::default();
    for (i, outcome) in outcomes {
        match outcome {
            Ok(EntryOutcome::Downloaded) => summary.downloaded += 1,
            Ok(EntryOutcome::Skipped) => summary.skipped += 1,
            Err(reason) => summary.failed.push(FailedEntry {
                relative_path: manifest.entries[i].relative_path.clone(),
                reason,
            }),
        }
    }
    Ok(summary)
}
