use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub outputs: Vec<OutputFile>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Every file under `out` except earlier manifests, sorted by path.
pub fn inventory(out: &Path) -> std::io::Result<Vec<OutputFile>> {
    let mut files = Vec::new();
    walk(out, &mut files)?;
    files
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n != MANIFEST))
        .map(|p| {
            let rel = p.strip_prefix(out).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            Ok(OutputFile { path: rel, bytes: fs::metadata(&p)?.len(), sha256: sha256_file(&p)? })
        })
        .collect()
}

pub fn write_manifest(
    out: &Path,
    command: &str,
    seeds: Vec<u64>,
    config: serde_json::Value,
    started: DateTime<Utc>,
) -> std::io::Result<RunManifest> {
    let manifest = RunManifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds,
        config,
        started,
        finished: Utc::now(),
        outputs: inventory(out)?,
    };
    fs::write(out.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
