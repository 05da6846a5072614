//! Output directory bookkeeping: every file goes through [`Artifacts`] so the
//! manifest can list it with its checksum.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub files: Vec<ManifestEntry>,
}

pub struct Artifacts {
    root: PathBuf,
    written: Vec<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Artifacts {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        Ok(Artifacts {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path for `rel`, creating parent directories.
    pub fn path(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    /// Registers a file written by someone else.
    pub fn track(&mut self, path: PathBuf) {
        if !self.written.contains(&path) {
            self.written.push(path);
        }
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(rel)?;
        fs::File::create(&p)?.write_all(bytes)?;
        self.track(p);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    /// Serializes `rows` under `header`; `None` fields become empty cells.
    pub fn write_csv<R: Serialize>(&mut self, rel: &str, header: &[String], rows: &[R]) -> Result<(), CliError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        self.write_bytes(rel, &bytes)
    }

    /// Checksums every tracked file and writes `manifest.json`.
    pub fn finish(self, command: &str) -> Result<Manifest, CliError> {
        let mut files = Vec::with_capacity(self.written.len());
        for p in &self.written {
            let bytes = fs::read(p)?;
            let rel = p.strip_prefix(&self.root).unwrap_or(p);
            files.push(ManifestEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            tool: "sphereflow".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            files,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.root.join("manifest.json"), text)?;
        Ok(manifest)
    }
}

/// Header names `prefix1, ..., prefixN`.
pub fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}
