use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// What a run produced. Paths are relative to the run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the stage's settings and input files; a resume is only
    /// honoured when it is unchanged.
    pub key: String,
    pub seed: Option<u64>,
    pub complete: bool,
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Option<Self>, CliError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path).map_err(|e| CliError::io(path.display(), e))?;
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(&path, text.as_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(tmp.display(), e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path.display(), e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a file, or of a directory's sorted relative names and contents.
pub fn hash_path(path: &Path) -> Result<String, CliError> {
    let mut h = Sha256::new();
    hash_into(&mut h, path, Path::new(""))?;
    Ok(hex::encode(h.finalize()))
}

fn hash_into(h: &mut Sha256, path: &Path, rel: &Path) -> Result<(), CliError> {
    let meta = fs::metadata(path).map_err(|e| CliError::io(path.display(), e))?;
    if meta.is_dir() {
        let mut names: Vec<_> = fs::read_dir(path)
            .map_err(|e| CliError::io(path.display(), e))?
            .filter_map(|e| e.ok().map(|e| e.file_name()))
            .collect();
        names.sort();
        for n in names {
            hash_into(h, &path.join(&n), &rel.join(&n))?;
        }
    } else {
        let bytes = fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(())
}
