//! Run configuration, read from a JSON file.
//!
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::KRange;
use crate::detector::{CommandDetector, Detector, DetectorCommand, SyntheticDetector, SyntheticDetectorConfig};
use crate::error::{Error, Result};
use crate::gram::AlphaPolicy;
use crate::selection::SelectionConfig;
use crate::self_labeling::ScoringConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringOptions {
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
    pub force_k: Option<usize>,
}

impl ClusteringOptions {
    pub fn range_for(&self, n: usize) -> KRange {
        let d = KRange::default_for(n);
        KRange {
            k_min: self.k_min.unwrap_or(d.k_min),
            k_max: self.k_max.unwrap_or(d.k_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorSpec {
    Synthetic(SyntheticDetectorConfig),
    Command(DetectorCommand),
}

/// Where the labels of key samples come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    /// Copy the hidden ground truth as if a human had drawn it.
    #[default]
    Oracle,
    /// Key label files must already exist in the label store.
    Store,
    /// Wait for annotations submitted through the annotation service.
    Service,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    /// Fully labeled version of the training set, used for the FS baseline.
    #[serde(default)]
    pub full_manifest: Option<PathBuf>,
    /// Hidden ground truth, one label file per sample.
    #[serde(default)]
    pub ground_truth_dir: Option<PathBuf>,
    pub work_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub clustering: ClusteringOptions,
    pub detector: DetectorSpec,
    #[serde(default)]
    pub alpha: AlphaPolicy,
    #[serde(default)]
    pub annotation: AnnotationMode,
    #[serde(default)]
    pub review_mode: bool,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_gate_timeout")]
    pub gate_timeout_secs: u64,
}

fn default_max_iterations() -> usize {
    100
}

fn default_gate_timeout() -> u64 {
    24 * 3600
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub ratio: Option<f64>,
    pub beta: Option<f64>,
    pub force_k: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        let mut cfg: RunConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes every relative path absolute with respect to `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train_manifest);
        fix(&mut self.test_manifest);
        fix(&mut self.work_dir);
        self.full_manifest.as_mut().map(fix);
        self.ground_truth_dir.as_mut().map(fix);
        if let DetectorSpec::Command(c) = &mut self.detector {
            c.config.as_mut().map(fix);
        }
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(r) = o.ratio {
            self.selection.ratio = r;
        }
        if let Some(b) = o.beta {
            self.scoring.beta = b;
        }
        if let Some(k) = o.force_k {
            self.clustering.force_k = Some(k);
        }
        if let Some(s) = o.seed {
            self.seed = s;
            if let DetectorSpec::Synthetic(c) = &mut self.detector {
                c.seed = s;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        self.scoring.validate()?;
        for p in [&self.train_manifest, &self.test_manifest] {
            if !p.is_file() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        if let Some(p) = &self.full_manifest {
            if !p.is_file() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        if let Some(d) = &self.ground_truth_dir {
            if !d.is_dir() {
                return Err(Error::MissingFile(d.clone()));
            }
        }
        match &self.detector {
            DetectorSpec::Synthetic(c) => {
                c.validate()?;
                if self.ground_truth_dir.is_none() {
                    return Err(Error::invalid("the synthetic detector needs ground_truth_dir"));
                }
            }
            DetectorSpec::Command(c) => c.validate()?,
        }
        if self.annotation == AnnotationMode::Oracle && self.ground_truth_dir.is_none() {
            return Err(Error::invalid("oracle annotation needs ground_truth_dir"));
        }
        if let AlphaPolicy::Fixed(a) = self.alpha {
            if !(a >= 0.0) {
                return Err(Error::invalid("alpha must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn build_detector(&self) -> Result<Box<dyn Detector>> {
        Ok(match &self.detector {
            DetectorSpec::Synthetic(c) => {
                let gt = self
                    .ground_truth_dir
                    .clone()
                    .ok_or_else(|| Error::invalid("the synthetic detector needs ground_truth_dir"))?;
                Box::new(SyntheticDetector::new(c.clone(), gt)?)
            }
            DetectorSpec::Command(c) => Box::new(CommandDetector::new(c.clone())?),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}
