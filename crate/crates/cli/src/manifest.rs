use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Regular files under `root`, sorted, recursing into directories.
pub fn files_under(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", root.display()));
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_dir() {
            out.extend(files_under(&path)?);
        } else if path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn checksums(paths: &[PathBuf], base: Option<&Path>) -> Result<Vec<Value>, CliError> {
    paths
        .iter()
        .map(|p| {
            let shown = base.and_then(|b| p.strip_prefix(b).ok()).unwrap_or(p);
            Ok(json!({ "path": shown.display().to_string(), "sha256": sha256_file(p)? }))
        })
        .collect()
}

pub struct Manifest<'a> {
    pub command: &'a str,
    pub argv: Vec<String>,
    pub config: &'a RunConfig,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub extra: Value,
}

impl Manifest<'_> {
    /// Writes `manifest.json` into `out_dir`. Artifact paths are stored
    /// relative to `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let mut inputs = Vec::new();
        for p in &self.inputs {
            inputs.extend(files_under(p)?);
        }
        let config: serde_json::Map<String, Value> =
            self.config.to_pairs().into_iter().map(|(k, v)| (k.to_string(), Value::String(v))).collect();
        let doc = json!({
            "tool": "rgmm",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "argv": self.argv,
            "seed": self.config.seed,
            "config": config,
            "inputs": checksums(&inputs, None)?,
            "artifacts": checksums(&self.artifacts, Some(out_dir))?,
            "details": self.extra,
        });
        let path = out_dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
