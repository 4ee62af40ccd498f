//! Output records, file writing and run manifests.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use dle_core::TokenId;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// One JSONL line: a DLE leaf or a sampled draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafRecord {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub q: f64,
    pub log_q: f64,
    pub new_tokens: usize,
    pub reused_prefix: usize,
    pub stop_reason: String,
    pub order: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draw: Option<usize>,
    pub prompt_index: usize,
    pub prompt: String,
    pub prompt_tokens: Vec<TokenId>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<LeafRecord>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// `leaves.jsonl` becomes `leaves.<suffix>`.
pub fn sibling_path(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

#[derive(Debug, Serialize)]
pub struct OutputFile {
    pub kind: &'static str,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Degraded {
    pub prompt_index: usize,
    pub reason: String,
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Debug, Serialize)]
pub struct Manifest<C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub argv: Vec<String>,
    pub config: C,
    pub seed: Option<u64>,
    pub model_sha256: Option<String>,
    pub prompts_sha256: String,
    pub outputs: Vec<OutputFile>,
    pub degraded: Vec<Degraded>,
}

impl<C: Serialize> Manifest<C> {
    pub fn new(command: &'static str, config: C, seed: Option<u64>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            argv: std::env::args().collect(),
            config,
            seed,
            model_sha256: None,
            prompts_sha256: String::new(),
            outputs: Vec::new(),
            degraded: Vec::new(),
        }
    }

    /// Writes `contents` to `path` and records its hash.
    pub fn emit(&mut self, kind: &'static str, path: &Path, contents: &str) -> Result<(), CliError> {
        write_file(path, contents)?;
        self.outputs.push(OutputFile {
            kind,
            path: path.to_path_buf(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling_path(Path::new("out/leaves.jsonl"), "metrics.json"), Path::new("out/leaves.metrics.json"));
        assert_eq!(sibling_path(Path::new("x"), "manifest.json"), Path::new("x.manifest.json"));
    }

    #[test]
    fn record_roundtrip_keeps_field_order() {
        let r = LeafRecord {
            tokens: vec![TokenId(1)],
            text: "A".into(),
            q: 0.5,
            log_q: 0.5f64.ln(),
            new_tokens: 1,
            reused_prefix: 0,
            stop_reason: "eos".into(),
            order: 0,
            draw: None,
            prompt_index: 0,
            prompt: String::new(),
            prompt_tokens: vec![],
        };
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.starts_with(r#"{"tokens":[1],"text":"A","q":0.5,"#));
        assert!(!line.contains("draw"));
        assert_eq!(serde_json::from_str::<LeafRecord>(&line).unwrap(), r);
    }
}
