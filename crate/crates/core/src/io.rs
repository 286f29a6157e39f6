//! JSONL and atomic file helpers.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{DifficultyRecord, Sample};

/// Parse one value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned, R: Read>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| Error::Jsonl { line: i + 1, source })?;
        out.push(value);
    }
    Ok(out)
}

pub fn read_jsonl_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(fs::File::open(path)?)
}

/// Serialize values as JSONL, one compact document per line.
pub fn to_jsonl<T: Serialize>(values: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for v in values {
        serde_json::to_writer(&mut buf, v)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Write `bytes` to `path` through a sibling temp file and a rename, so the
/// final path either holds the complete contents or is untouched.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Load a dataset file, enforcing unique ids and non-empty answers.
pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> = read_jsonl_file(path)?;
    check_samples(&samples)?;
    Ok(samples)
}

pub fn check_samples(samples: &[Sample]) -> Result<()> {
    let mut seen = HashSet::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        if !seen.insert(s.id.as_str()) {
            return Err(Error::contract(format!("duplicate sample id `{}`", s.id)));
        }
    }
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<DifficultyRecord>> {
    read_jsonl_file(path)
}
