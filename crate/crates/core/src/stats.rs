use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::model::Rect;
use crate::store::LabelStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Normal,
    Big,
}

/// Small below 1% of the image area, big above 10%, normal in `[1%, 10%]`.
pub fn size_class(rect: &Rect, width: u32, height: u32) -> SizeClass {
    let image_area = width as f64 * height as f64;
    // Compare area * 100 against the image area to keep the 1% edge exact.
    let scaled = rect.area() * 100.0;
    if scaled < image_area {
        SizeClass::Small
    } else if scaled > 10.0 * image_area {
        SizeClass::Big
    } else {
        SizeClass::Normal
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SizeCounts {
    pub small: usize,
    pub normal: usize,
    pub big: usize,
}

impl SizeCounts {
    fn bump(&mut self, c: SizeClass) {
        match c {
            SizeClass::Small => self.small += 1,
            SizeClass::Normal => self.normal += 1,
            SizeClass::Big => self.big += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.small + self.normal + self.big
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SizeHistogram {
    pub per_class: BTreeMap<String, SizeCounts>,
    pub total: SizeCounts,
}

/// Object-size histogram over every labeled entry of `manifest`.
pub fn dataset_stats(manifest: &Manifest, store: &LabelStore) -> Result<SizeHistogram> {
    let mut hist = SizeHistogram::default();
    for entry in &manifest.entries {
        let (w, h) = store
            .bounds(&entry.id)
            .ok_or_else(|| Error::UnknownSample(entry.id.clone()))?;
        let labels = store
            .read(&entry.id)?
            .ok_or_else(|| Error::invalid(format!("entry {:?} is unlabeled", entry.id)))?;
        for b in &labels.boxes {
            let c = size_class(&b.rect, w, h);
            hist.per_class.entry(b.class_name.clone()).or_default().bump(c);
            hist.total.bump(c);
        }
    }
    Ok(hist)
}
