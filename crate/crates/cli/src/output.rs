//! Atomic output files, each with a `<name>.prov.json` sidecar.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use ntk_features::io::{sha256_hex, write_atomic};

#[derive(Serialize)]
struct Provenance<'a> {
    file: String,
    sha256: String,
    config_hash: &'a str,
    checkpoint_epoch: Option<usize>,
    spec: Option<&'a serde_json::Value>,
    library_version: &'static str,
}

/// Writes results under one output root, stamping each with the config hash.
pub struct Writer {
    pub root: PathBuf,
    pub config_hash: String,
}

impl Writer {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(
        &self,
        rel: &str,
        bytes: &[u8],
        epoch: Option<usize>,
        spec: Option<&serde_json::Value>,
    ) -> Result<PathBuf> {
        let path = self.path(rel);
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.stamp(&path, epoch, spec)?;
        Ok(path)
    }

    pub fn write_json(
        &self,
        rel: &str,
        value: &impl Serialize,
        epoch: Option<usize>,
        spec: Option<&serde_json::Value>,
    ) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes, epoch, spec)
    }

    /// Adds the provenance sidecar for a file something else wrote.
    pub fn stamp(
        &self,
        path: &Path,
        epoch: Option<usize>,
        spec: Option<&serde_json::Value>,
    ) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let record = Provenance {
            file: name.clone(),
            sha256: sha256_hex(&bytes),
            config_hash: &self.config_hash,
            checkpoint_epoch: epoch,
            spec,
            library_version: ntk_features::VERSION,
        };
        let mut out = serde_json::to_vec_pretty(&record)?;
        out.push(b'\n');
        write_atomic(&path.with_file_name(format!("{name}.prov.json")), &out)?;
        Ok(())
    }
}
