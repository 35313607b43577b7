//! Flat-file storage: run configuration, question files, tree dumps,
//! sample and trace files.
//!
//! Output files are line-delimited JSON. The first line is a header naming
//! the schema version, the record kind and the config hash. Writes go to a
//! temporary file in the target directory and are renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{DefaultBehavior, GatewaySettings, Grader, RemoteSettings, RetryPolicy};
use crate::mcts::{SearchTree, TreeRecord};
use crate::types::{CritiqueSample, Question, SearchConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl StoreError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn invalid(path: &Path, message: impl Into<String>) -> Self {
        Self::Invalid {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// First line of every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHeader {
    /// Always `"header"`; lets readers tell it apart from data lines.
    pub record: String,
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
}

impl FileHeader {
    pub fn new(kind: &str, config_hash: impl Into<String>) -> Self {
        Self {
            record: "header".into(),
            schema_version: SCHEMA_VERSION,
            kind: kind.into(),
            config_hash: config_hash.into(),
        }
    }
}

fn is_header(line: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("record").and_then(|r| r.as_str()).map(|r| r == "header"))
        .unwrap_or(false)
}

/// Writes `contents` to `path` atomically, creating parent directories.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| StoreError::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| StoreError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| StoreError::io(path, e))?;
    tmp.persist(path).map_err(|e| StoreError::io(path, e.error))?;
    Ok(())
}

/// Serializes one record per line.
pub fn to_jsonl<T: Serialize>(header: Option<&FileHeader>, records: &[T]) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&serde_json::to_string(h).expect("header serializes"));
        out.push('\n');
    }
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &FileHeader, records: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(Some(header), records).as_bytes())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| StoreError::io(path, e))
}

/// Parses every data line strictly; the first bad line is an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || is_header(line) {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| StoreError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads a question file. Duplicate ids and questions without a ground
/// truth are rejected.
pub fn read_questions(path: &Path) -> Result<Vec<Question>> {
    let qs: Vec<Question> = read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    for q in &qs {
        let v = q.violations();
        if !v.is_empty() {
            return Err(StoreError::invalid(
                path,
                format!("question {}: {}", q.id, v.join("; ")),
            ));
        }
        if !seen.insert(q.id.as_str()) {
            return Err(StoreError::invalid(path, format!("duplicate question id {}", q.id)));
        }
    }
    Ok(qs)
}

/// Parses sample lines leniently: returns the valid samples and the 1-based
/// numbers of lines that failed to parse or validate.
pub fn parse_samples(text: &str) -> (Vec<CritiqueSample>, Vec<usize>) {
    let mut samples = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || is_header(line) {
            continue;
        }
        match serde_json::from_str::<CritiqueSample>(line) {
            Ok(s) if s.violations().is_empty() => samples.push(s),
            Ok(s) => {
                log::warn!("line {}: invalid sample: {}", i + 1, s.violations().join("; "));
                bad.push(i + 1);
            }
            Err(e) => {
                log::warn!("line {}: {e}", i + 1);
                bad.push(i + 1);
            }
        }
    }
    (samples, bad)
}

/// File name for a question's tree dump. The index keeps directory order
/// equal to question order.
pub fn tree_file_name(index: usize, question_id: &str) -> String {
    let safe: String = question_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:05}-{safe}.tree.jsonl")
}

pub fn write_tree(path: &Path, tree: &SearchTree, config: &SearchConfig) -> Result<()> {
    write_atomic(path, to_jsonl::<TreeRecord>(None, &tree.to_records(config)).as_bytes())
}

pub fn read_tree(path: &Path) -> Result<(SearchTree, SearchConfig)> {
    let text = read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<TreeRecord>(line).map_err(|e| StoreError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    SearchTree::from_records(records).map_err(|m| StoreError::invalid(path, m))
}

/// Tree dump files in a directory, sorted by name.
pub fn list_trees(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| StoreError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".tree.jsonl"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Mock backend section of the run config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSettings {
    pub script: Option<PathBuf>,
    pub default_behavior: DefaultBehavior,
}

/// Gateway section of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub max_retries: u32,
    pub retry_base_ms: u64,
    /// Critic score used when a verdict carries none.
    pub score_fallback: Option<f64>,
    pub grader: Grader,
}

impl GatewayConfig {
    pub fn to_settings(&self, step_token_cap: usize) -> GatewaySettings {
        GatewaySettings {
            step_token_cap,
            retry: RetryPolicy {
                max_retries: self.max_retries,
                base_delay: Duration::from_millis(self.retry_base_ms),
            },
            score_fallback: self.score_fallback,
            grader: self.grader,
        }
    }
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            max_retries: 3,
            retry_base_ms: 500,
            score_fallback: None,
            grader: Grader::Normalized,
        }
    }
}

/// Everything a run needs, loaded from one TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; unset uses one per core.
    pub parallelism: Option<usize>,
    pub search: SearchConfig,
    pub gateway: GatewayConfig,
    pub remote: RemoteSettings,
    pub mock: MockSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.search.validate().map_err(|v| v.join("; "))?;
        if cfg.parallelism == Some(0) {
            return Err("parallelism must be ≥ 1".into());
        }
        Ok(cfg)
    }

    /// Loads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|m| StoreError::invalid(path, m))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(s) = cfg.mock.script.as_mut() {
            if s.is_relative() {
                *s = base.join(&*s);
            }
        }
        if let Some(t) = cfg.remote.templates_dir.as_mut() {
            if t.is_relative() {
                *t = base.join(&*t);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
