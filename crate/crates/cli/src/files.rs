//! Dataset discovery and output manifests.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spikeseg::data::{preprocess, read_volume};
use spikeseg::MultiModalVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash every regular file under `dir` except the manifest itself.
pub fn write_manifest(dir: &Path, command: &str) -> Result<Manifest> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort_by(|a, b| a.file.cmp(&b.file));
    let m = Manifest { command: command.into(), files };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(m)
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<ManifestEntry>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != "manifest.json") {
            let bytes = std::fs::read(&path)?;
            let rel = path.strip_prefix(root)?.to_string_lossy().replace('\\', "/");
            out.push(ManifestEntry { file: rel, sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
        }
    }
    Ok(())
}

pub fn volume_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading data directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "smmv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .smmv volumes in {}", dir.display());
    }
    Ok(files)
}

/// Read, crop and normalize every volume of a directory, keyed by file stem.
pub fn load_dataset(dir: &Path, crop: Option<[usize; 3]>) -> Result<Vec<(String, MultiModalVolume)>> {
    volume_files(dir)?
        .into_iter()
        .map(|p| {
            let raw = read_volume(&p).with_context(|| format!("reading {}", p.display()))?;
            let target = crop.unwrap_or_else(|| raw.dims());
            let vol = preprocess(&raw, target).with_context(|| format!("preprocessing {}", p.display()))?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, vol))
        })
        .collect()
}
