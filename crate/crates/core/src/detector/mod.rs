//! The two-headed detector boundary.
//!
//! A detector trains on a manifest whose entries reference label files,
//! predicts both heads on a manifest, and may expose per-sample ROI features
//! of the two heads for gram diagnostics. Detection losses cross the boundary
//! as opaque scalars.

mod command;
mod synthetic;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use command::{CommandDetector, DetectorCommand};
pub use synthetic::{SyntheticDetector, SyntheticDetectorConfig};

use crate::error::{Error, Result};
use crate::gram::FeatureMap;
use crate::manifest::Manifest;
use crate::self_labeling::PredictionPair;

/// The `training report` wire record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub loss_d1: f64,
    pub loss_d2: f64,
    pub gram_loss: Option<f64>,
    pub epochs: u32,
}

/// ROI features of head 1 and head 2 for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub sample_id: String,
    pub d1: FeatureMap,
    pub d2: FeatureMap,
}

pub trait Detector: Send {
    /// Trains both heads from scratch (or warm-started, at the plugin's
    /// discretion) on every entry of `train` that has a label file.
    fn train(&mut self, train: &Manifest, work_dir: &Path) -> Result<TrainingReport>;

    /// One prediction pair per manifest entry, in manifest order.
    fn predict(&mut self, manifest: &Manifest, work_dir: &Path) -> Result<Vec<PredictionPair>>;

    /// Optional; returns [`Error::Unsupported`] when the plugin has no
    /// feature endpoint.
    fn report_features(&mut self, manifest: &Manifest, work_dir: &Path) -> Result<Vec<FeaturePair>> {
        let _ = (manifest, work_dir);
        Err(Error::Unsupported("feature reporting"))
    }
}

pub fn write_predictions(path: &Path, pairs: &[PredictionPair]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionPair>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Orders `pairs` to follow `manifest`, failing on missing, duplicate or
/// foreign sample ids.
pub fn align_predictions(manifest: &Manifest, pairs: Vec<PredictionPair>) -> Result<Vec<PredictionPair>> {
    let mut by_id = std::collections::BTreeMap::new();
    for p in pairs {
        if manifest.get(&p.sample_id).is_none() {
            return Err(protocol_violation(format!("prediction for unknown sample {:?}", p.sample_id)));
        }
        let id = p.sample_id.clone();
        if by_id.insert(id.clone(), p).is_some() {
            return Err(protocol_violation(format!("duplicate prediction for {id:?}")));
        }
    }
    manifest
        .entries
        .iter()
        .map(|e| {
            by_id
                .remove(&e.id)
                .ok_or_else(|| protocol_violation(format!("no prediction for sample {:?}", e.id)))
        })
        .collect()
}

fn protocol_violation(message: String) -> Error {
    Error::Plugin {
        message: format!("protocol violation: {message}"),
        diagnostics: String::new(),
    }
}

/// Feature files written by a plugin: `<dir>/<id>.d1.csv` and `<id>.d2.csv`.
pub fn feature_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    let stem = crate::store::file_stem(id);
    (dir.join(format!("{stem}.d1.csv")), dir.join(format!("{stem}.d2.csv")))
}
