//! Run manifest: one JSON line per executed stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ReidError, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHash {
    /// Relative to the run's output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelReads {
    pub training: usize,
    pub evaluation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub inputs: Vec<ArtifactHash>,
    pub outputs: Vec<ArtifactHash>,
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
    pub wall_time_secs: f64,
    /// Target ground-truth reads made while this stage ran.
    pub label_reads: LabelReads,
}

fn collect_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| ReidError::io(dir, e))? {
        let path = entry.map_err(|e| ReidError::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 of a file, or of every file below a directory (relative names and
/// contents, in sorted order).
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).expect("walked below root");
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(fs::read(&f).map_err(|e| ReidError::io(&f, e))?);
        }
    } else {
        h.update(fs::read(path).map_err(|e| ReidError::io(path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn read_manifest(root: &Path) -> Result<Vec<RunManifest>> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| ReidError::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| ReidError::corrupt(&path, format!("line {}: {e}", n + 1))))
        .collect()
}

/// Appends `entry`, dropping older entries of the same stage so that each
/// artifact stays owned by exactly one entry.
pub fn record(root: &Path, entry: &RunManifest) -> Result<()> {
    let mut entries = read_manifest(root)?;
    entries.retain(|e| e.stage != entry.stage);
    entries.push(entry.clone());
    let mut text = String::new();
    for e in &entries {
        text.push_str(&serde_json::to_string(e).expect("manifest serializes"));
        text.push('\n');
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| ReidError::io(&path, e))
}
