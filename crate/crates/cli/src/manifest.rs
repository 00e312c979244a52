//! Run manifests: what a subcommand read and wrote, with content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    /// RFC 3339, UTC. The only field that differs between identical runs.
    pub timestamp: String,
    /// SHA-256 of every output file, keyed by path.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(subcommand: &str) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            timestamp: String::new(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Hashes the outputs (directories recursively, skipping `exclude`), stamps the
    /// time and writes the manifest to `path` through a rename.
    pub fn finish(mut self, path: &Path) -> Result<Self> {
        self.artifacts.clear();
        for out in &self.outputs {
            for file in files_under(out)? {
                if file == path {
                    continue;
                }
                self.artifacts
                    .insert(file.display().to_string(), sha256_file(&file)?);
            }
        }
        self.timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        write_atomic(
            path,
            (serde_json::to_string_pretty(&self)? + "\n").as_bytes(),
        )?;
        Ok(self)
    }
}

fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.with_context(|| format!("listing {}", path.display()))?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f =
            fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))
}

/// `<path>.run.json` next to a file output, or `run.json` inside a directory output.
pub fn default_path(primary: &Path) -> PathBuf {
    if primary.is_dir() {
        primary.join("run.json")
    } else {
        let mut s = primary.as_os_str().to_owned();
        s.push(".run.json");
        PathBuf::from(s)
    }
}
