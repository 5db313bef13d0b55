//! JSON Lines dataset manifests.
//!
//! The first non-blank line is a header `{"purpose": "train"|"unlabeled"|"test"}`;
//! every following line is `{"id": str, "image": path, "labels": path|null}`.
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Train,
    Unlabeled,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub purpose: Purpose,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    purpose: Purpose,
}

impl Manifest {
    pub fn new(purpose: Purpose, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self { purpose, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    /// Writes the manifest with the paths exactly as stored in the entries.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut out, &Header { purpose: self.purpose })?;
        out.write_all(b"\n")?;
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Parses and validates a manifest file.
///
/// Rejects malformed lines (with their 1-based line number), duplicate ids,
/// and references to image or label files that do not exist.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut purpose = None;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if purpose.is_none() {
            let h: Header =
                serde_json::from_str(line).map_err(|e| parse_err(line_no, format!("bad header: {e}")))?;
            purpose = Some(h.purpose);
            continue;
        }
        let mut entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| parse_err(line_no, format!("bad entry: {e}")))?;
        if entry.id.is_empty() {
            return Err(parse_err(line_no, "empty id".into()));
        }
        if !seen.insert(entry.id.clone()) {
            return Err(Error::DuplicateId(entry.id));
        }
        entry.image = base.join(&entry.image);
        if !entry.image.is_file() {
            return Err(Error::MissingFile(entry.image));
        }
        if let Some(l) = entry.labels.take() {
            let l = base.join(l);
            if !l.is_file() {
                return Err(Error::MissingFile(l));
            }
            entry.labels = Some(l);
        }
        entries.push(entry);
    }
    let purpose = purpose.ok_or_else(|| parse_err(1, "missing purpose header".into()))?;
    Ok(Manifest { purpose, entries })
}
