use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Record of how an artifact set was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub timestamp: String,
    /// SHA-256 of the corpus the run read, when it read one.
    pub corpus_sha256: Option<String>,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// Effective configuration after flag overrides.
    pub config: toml::Table,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f
            .read(&mut buf)
            .with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub struct ManifestBuilder {
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(seed: Option<u64>) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                command: std::env::args().collect(),
                seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                timestamp: chrono::Utc::now().to_rfc3339(),
                corpus_sha256: None,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                config: toml::Table::new(),
            },
        }
    }

    pub fn corpus(mut self, path: &Path) -> Result<Self> {
        let h = sha256_file(path)?;
        self.manifest.corpus_sha256 = Some(h.clone());
        self.manifest.inputs.insert(path.display().to_string(), h);
        Ok(self)
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        let h = sha256_file(path)?;
        self.manifest.inputs.insert(path.display().to_string(), h);
        Ok(self)
    }

    pub fn output(mut self, path: impl Into<PathBuf>) -> Self {
        self.manifest.outputs.push(path.into().display().to_string());
        self
    }

    pub fn config<S: Serialize>(mut self, config: &S) -> Result<Self> {
        self.manifest.config = toml::Table::try_from(config).context("serializing config snapshot")?;
        Ok(self)
    }

    /// Writes `dest`, which is either a directory (gets `manifest.toml`) or
    /// an artifact file (gets `<file>.manifest.toml`).
    pub fn write(self, dest: &Path) -> Result<PathBuf> {
        let path = if dest.is_dir() {
            dest.join(MANIFEST_FILE)
        } else {
            let mut name = dest.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.toml");
            dest.with_file_name(name)
        };
        let text = toml::to_string(&self.manifest).context("serializing manifest")?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
