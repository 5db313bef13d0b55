//! Core records shared by every stage of the pipeline.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lifecycle of a training image.
///
/// Legal moves: `Unlabeled -> KeyPendingAnnotation -> LabeledHuman` and
/// `Unlabeled -> LabeledSelf`. The review queue adds two human overrides of a
/// self-labeled sample: reject (`LabeledSelf -> Unlabeled`) and edit
/// (`LabeledSelf -> LabeledHuman`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Unlabeled,
    KeyPendingAnnotation,
    LabeledHuman,
    LabeledSelf,
    Excluded,
}

impl Status {
    pub const ALL: [Status; 5] = [
        Status::Unlabeled,
        Status::KeyPendingAnnotation,
        Status::LabeledHuman,
        Status::LabeledSelf,
        Status::Excluded,
    ];

    /// Transitions taken by the automated pipeline.
    pub fn can_advance_to(self, next: Status) -> bool {
        matches!(
            (self, next),
            (Status::Unlabeled, Status::KeyPendingAnnotation)
                | (Status::KeyPendingAnnotation, Status::LabeledHuman)
                | (Status::Unlabeled, Status::LabeledSelf)
        )
    }

    /// Transitions a reviewer may force on a self-labeled sample.
    pub fn can_review_to(self, next: Status) -> bool {
        matches!(
            (self, next),
            (Status::LabeledSelf, Status::Unlabeled) | (Status::LabeledSelf, Status::LabeledHuman)
        )
    }

    pub fn is_in_training_pool(self) -> bool {
        matches!(self, Status::LabeledHuman | Status::LabeledSelf)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Unlabeled => "unlabeled",
            Status::KeyPendingAnnotation => "key_pending_annotation",
            Status::LabeledHuman => "labeled_human",
            Status::LabeledSelf => "labeled_self",
            Status::Excluded => "excluded",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    Human,
    #[serde(rename = "self")]
    SelfLabel,
    HiddenGt,
}

/// Axis-aligned box in absolute pixel coordinates, origin top-left.
///
/// Predictions carry no `source`; stored labels always do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    #[serde(rename = "class")]
    pub class_name: String,
    #[serde(rename = "bbox", with = "bbox_array")]
    pub rect: Rect,
    #[serde(default = "one")]
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<BoxSource>,
}

/// A detector output: same record as a label, without a source.
pub type Detection = BoundingBox;

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x_min.is_finite() && self.y_min.is_finite() && self.x_max.is_finite() && self.y_max.is_finite()
    }

    pub fn is_proper(&self) -> bool {
        self.is_finite() && self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> Rect {
        Rect {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }
}

mod bbox_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Rect;

    pub fn serialize<S: Serializer>(r: &Rect, s: S) -> Result<S::Ok, S::Error> {
        [r.x_min, r.y_min, r.x_max, r.y_max].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rect, D::Error> {
        let [x_min, y_min, x_max, y_max] = <[f64; 4]>::deserialize(d)?;
        Ok(Rect {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }
}

impl BoundingBox {
    pub fn new(class_name: impl Into<String>, rect: Rect) -> Self {
        Self {
            class_name: class_name.into(),
            rect,
            confidence: 1.0,
            source: None,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn with_source(mut self, source: BoxSource) -> Self {
        self.source = Some(source);
        self
    }

    /// Checks the geometric and confidence invariants against image bounds.
    /// Returns a human-readable reason on failure.
    pub fn check(&self, width: u32, height: u32) -> std::result::Result<(), String> {
        let r = &self.rect;
        if !r.is_finite() {
            return Err("non-finite coordinate".into());
        }
        if r.x_min >= r.x_max {
            return Err(format!("x_min {} >= x_max {}", r.x_min, r.x_max));
        }
        if r.y_min >= r.y_max {
            return Err(format!("y_min {} >= y_max {}", r.y_min, r.y_max));
        }
        if !r.within(width as f64, height as f64) {
            return Err(format!(
                "[{}, {}, {}, {}] outside image {}x{}",
                r.x_min, r.y_min, r.x_max, r.y_max, width, height
            ));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        if self.class_name.is_empty() {
            return Err("empty class name".into());
        }
        Ok(())
    }
}

/// The boxes of one sample as persisted in the label store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub sample_id: String,
    pub revision: u64,
    pub annotator: String,
    pub boxes: Vec<BoundingBox>,
}

impl LabelSet {
    pub fn new(sample_id: impl Into<String>, annotator: impl Into<String>, boxes: Vec<BoundingBox>) -> Self {
        Self {
            sample_id: sample_id.into(),
            revision: 0,
            annotator: annotator.into(),
            boxes,
        }
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        for (index, b) in self.boxes.iter().enumerate() {
            b.check(width, height).map_err(|reason| Error::InvalidBox {
                sample_id: self.sample_id.clone(),
                index,
                reason,
            })?;
        }
        Ok(())
    }
}

/// One image of the training set together with its pipeline state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub status: Status,
    pub cluster_id: Option<usize>,
    pub entropy: Option<f64>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image_path: impl Into<PathBuf>, width: u32, height: u32) -> Result<Self> {
        let id = id.into();
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("sample {id:?} has zero-sized image")));
        }
        Ok(Self {
            id,
            image_path: image_path.into(),
            width,
            height,
            status: Status::Unlabeled,
            cluster_id: None,
            entropy: None,
        })
    }

    pub fn transition(&mut self, next: Status) -> Result<()> {
        if !self.status.can_advance_to(next) {
            return Err(Error::IllegalTransition {
                sample_id: self.id.clone(),
                from: self.status,
                to: next,
            });
        }
        self.status = next;
        Ok(())
    }

    pub fn review(&mut self, next: Status) -> Result<()> {
        if !self.status.can_review_to(next) {
            return Err(Error::IllegalTransition {
                sample_id: self.id.clone(),
                from: self.status,
                to: next,
            });
        }
        self.status = next;
        Ok(())
    }

    /// Sets the cluster once; re-assigning a different cluster is rejected.
    pub fn assign_cluster(&mut self, cluster: usize) -> Result<()> {
        match self.cluster_id {
            Some(c) if c != cluster => Err(Error::invalid(format!(
                "sample {:?} already in cluster {c}, cannot move to {cluster}",
                self.id
            ))),
            _ => {
                self.cluster_id = Some(cluster);
                Ok(())
            }
        }
    }
}
