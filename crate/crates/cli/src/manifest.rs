//! Provenance records written next to every command's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// No timestamps or absolute output paths, so identical runs give identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

pub struct ManifestBuilder {
    command: String,
    config_text: String,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    /// `config_text` is the canonical serialization of everything that
    /// parameterizes the command.
    pub fn new(command: &str, config_text: String, seed: Option<u64>) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config_text,
            seed,
            inputs: Vec::new(),
        }
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn inputs<'a>(mut self, paths: impl IntoIterator<Item = &'a PathBuf>) -> Self {
        self.inputs.extend(paths.into_iter().cloned());
        self
    }

    /// Hashes every regular file under `out_dir` (sorted, relative paths) and
    /// writes `out_dir/manifest`.
    pub fn write(self, out_dir: &Path) -> Result<Manifest> {
        let mut files = Vec::new();
        collect_files(out_dir, &mut files)?;
        files.sort();
        let manifest_path = out_dir.join("manifest");
        let mut outputs = Vec::new();
        for f in files.into_iter().filter(|f| *f != manifest_path) {
            let rel = f.strip_prefix(out_dir).unwrap_or(&f);
            outputs.push(FileRecord {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: file_digest(&f)?,
            });
        }
        let inputs = self
            .inputs
            .iter()
            .map(|p| {
                Ok(FileRecord {
                    path: p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned()),
                    sha256: file_digest(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(self.config_text.as_bytes()),
            seed: self.seed,
            inputs,
            outputs,
        };
        fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
