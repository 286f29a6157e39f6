//! Run manifests and tracked, atomic output files.

use std::fs;
use std::path::{Path, PathBuf};

use currl_core::io::atomic_write;
use currl_core::{Result, ENGINE_VERSION};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// What produced a set of outputs: identical manifests mean identical bytes.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub argv: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub engine_version: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Records every file a command reads and writes. If the command fails,
/// [`Tracker::discard`] removes whatever it already wrote.
#[derive(Debug, Default)]
pub struct Tracker {
    argv: Vec<String>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    written: Vec<PathBuf>,
}

impl Tracker {
    pub fn new(argv: Vec<String>) -> Self {
        Tracker {
            argv,
            ..Default::default()
        }
    }

    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        atomic_write(path, bytes)?;
        self.written.push(path.to_path_buf());
        self.outputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(path, &bytes)
    }

    /// Write the manifest for everything recorded so far.
    pub fn finish(&mut self, path: &Path, config: Value, seed: Option<u64>) -> Result<()> {
        let manifest = RunManifest {
            argv: self.argv.clone(),
            config,
            seed,
            engine_version: ENGINE_VERSION.to_string(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        };
        self.write_json(path, &manifest)
    }

    pub fn discard(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }
}

/// `<path>.manifest.json`, next to the primary output.
pub fn manifest_path(output: &Path) -> PathBuf {
    sibling(output, "manifest.json")
}

/// `<path>.<suffix>`.
pub fn sibling(output: &Path, suffix: &str) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    output.with_file_name(name)
}
