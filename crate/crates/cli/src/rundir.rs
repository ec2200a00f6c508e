use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";
pub const CONFIG: &str = "config.toml";

/// Format versions of the artifacts this binary writes.
pub fn format_versions() -> BTreeMap<String, u32> {
    BTreeMap::from([
        ("checkpoint".to_string(), mtplab::model::FORMAT_VERSION),
        ("corpus_jsonl".to_string(), 1),
        ("metrics_jsonl".to_string(), 1),
        ("manifest".to_string(), 1),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_versions: BTreeMap<String, u32>,
    pub artifacts: BTreeMap<String, Artifact>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            format_versions: format_versions(),
            artifacts: BTreeMap::new(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A run directory held under an exclusive lock for the life of the value.
/// Every file written through it is recorded in the manifest.
pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    pub fn open(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating run directory {}", root.display()))?;
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Locked(lock).into());
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        }
        let mut dir = RunDir {
            root: root.to_path_buf(),
            manifest: Manifest::default(),
        };
        let path = root.join(MANIFEST);
        if path.exists() {
            let m: Manifest = serde_json::from_slice(&fs::read(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?;
            dir.manifest.artifacts = m.artifacts;
        }
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    pub fn read(&self, rel: &str) -> anyhow::Result<Vec<u8>> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(CliError::Missing(p).into());
        }
        Ok(fs::read(&p)?)
    }

    /// Writes `bytes` to `rel` atomically and records it.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let dest = self.path(rel);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = dest.with_file_name(format!(
            ".{}.tmp",
            dest.file_name().expect("artifact has a file name").to_string_lossy()
        ));
        {
            let mut f = fs::File::create(&tmp).with_context(|| format!("writing {}", tmp.display()))?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &dest).with_context(|| format!("renaming into {}", dest.display()))?;
        self.manifest.artifacts.insert(
            rel.to_string(),
            Artifact {
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        self.save_manifest()
    }

    pub fn remove(&mut self, rel: &str) -> anyhow::Result<()> {
        let p = self.path(rel);
        if p.exists() {
            fs::remove_file(&p)?;
        }
        if self.manifest.artifacts.remove(rel).is_some() {
            self.save_manifest()?;
        }
        Ok(())
    }

    /// Drops every artifact under `prefix/`.
    pub fn clear_stage(&mut self, prefix: &str) -> anyhow::Result<()> {
        let names: Vec<String> = self
            .manifest
            .artifacts
            .keys()
            .filter(|k| k.starts_with(&format!("{prefix}/")))
            .cloned()
            .collect();
        for n in names {
            self.remove(&n)?;
        }
        Ok(())
    }

    fn save_manifest(&self) -> anyhow::Result<()> {
        let mut text = serde_json::to_vec_pretty(&self.manifest)?;
        text.push(b'\n');
        let dest = self.root.join(MANIFEST);
        let tmp = self.root.join(format!(".{MANIFEST}.tmp"));
        fs::write(&tmp, &text)?;
        fs::rename(&tmp, &dest)?;
        Ok(())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK));
    }
}
