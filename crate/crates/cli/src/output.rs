use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Provenance, Resolved};

/// Collects artifacts written under one output directory.
pub struct OutputDir {
    root: PathBuf,
    artifacts: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub provenance: BTreeMap<String, Provenance>,
    /// Relative path -> SHA-256 of the file contents.
    pub artifacts: BTreeMap<String, String>,
}

pub const MANIFEST: &str = "manifest.json";

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), artifacts: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Writes through `f` into `rel`, creating parent directories.
    pub fn write<F>(&mut self, rel: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<fs::File>) -> Result<()>,
    {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        std::io::Write::flush(&mut w)?;
        self.artifacts.push(PathBuf::from(rel));
        Ok(())
    }

    pub fn write_str(&mut self, rel: &str, text: &str) -> Result<()> {
        self.write(rel, |w| Ok(std::io::Write::write_all(w, text.as_bytes())?))
    }

    /// Registers a file already present on disk (e.g. from a resumed run).
    pub fn track(&mut self, rel: &str) {
        self.artifacts.push(PathBuf::from(rel));
    }

    pub fn finish(self, command: &str, resolved: &Resolved) -> Result<()> {
        let mut artifacts = BTreeMap::new();
        for rel in &self.artifacts {
            let bytes = fs::read(self.root.join(rel))?;
            let key = rel.to_string_lossy().replace('\\', "/");
            artifacts.insert(key, hex::encode(Sha256::digest(&bytes)));
        }
        let manifest = Manifest {
            command: command.to_string(),
            seed: resolved.config.seed,
            config_hash: resolved.hash()?,
            config: serde_json::to_value(&resolved.config)?,
            provenance: resolved.provenance.clone(),
            artifacts,
        };
        fs::write(self.root.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}
