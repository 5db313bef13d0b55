//! One-JSON-file-per-sample label store with optimistic revisions.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::model::LabelSet;

/// Label files live at `<dir>/<escaped id>.json`. Every write goes through a
/// single mutex and is published with an atomic rename, so readers never see
/// a torn file.
#[derive(Debug)]
pub struct LabelStore {
    dir: PathBuf,
    bounds: BTreeMap<String, (u32, u32)>,
    writer: Mutex<()>,
}

impl LabelStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            bounds: BTreeMap::new(),
            writer: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Declares a sample and its image size; writes for undeclared ids fail.
    pub fn register(&mut self, id: &str, width: u32, height: u32) {
        self.bounds.insert(id.to_string(), (width, height));
    }

    pub fn contains(&self, id: &str) -> bool {
        self.bounds.contains_key(id)
    }

    pub fn bounds(&self, id: &str) -> Option<(u32, u32)> {
        self.bounds.get(id).copied()
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{}.json", file_stem(id)))
    }

    pub fn read(&self, id: &str) -> Result<Option<LabelSet>> {
        if !self.contains(id) {
            return Err(Error::UnknownSample(id.to_string()));
        }
        read_label_file(&self.path_for(id))
    }

    /// Current revision, 0 when nothing has been written yet.
    pub fn revision(&self, id: &str) -> Result<u64> {
        Ok(self.read(id)?.map_or(0, |l| l.revision))
    }

    /// Persists `labels` if its `revision` equals the stored one and returns
    /// the new revision (previous + 1). On any error the store is unchanged.
    pub fn write(&self, labels: &LabelSet) -> Result<u64> {
        let (w, h) = self
            .bounds(&labels.sample_id)
            .ok_or_else(|| Error::UnknownSample(labels.sample_id.clone()))?;
        labels.validate(w, h)?;

        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let current = self.revision(&labels.sample_id)?;
        if labels.revision != current {
            return Err(Error::RevisionConflict {
                sample_id: labels.sample_id.clone(),
                expected: labels.revision,
                current,
            });
        }
        let mut stored = labels.clone();
        stored.revision = current + 1;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        serde_json::to_writer_pretty(&mut tmp, &stored)?;
        tmp.write_all(b"\n")?;
        tmp.as_file().sync_all()?;
        tmp.persist(self.path_for(&labels.sample_id)).map_err(|e| e.error)?;
        Ok(stored.revision)
    }

    /// Drops a label file; used when rolling back uncommitted writes.
    pub fn remove(&self, id: &str) -> Result<()> {
        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        match fs::remove_file(self.path_for(id)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}

/// Free-function form of [`LabelStore::write`].
pub fn write_labels(store: &LabelStore, labels: &LabelSet) -> Result<u64> {
    store.write(labels)
}

pub fn read_label_file(path: &Path) -> Result<Option<LabelSet>> {
    match fs::read(path) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn file_stem(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || b == b'.' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    if out.starts_with('.') {
        out.replace_range(0..1, "%2E");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, BoxSource, Rect};

    fn store() -> (tempfile::TempDir, LabelStore) {
        let dir = tempfile::tempdir().unwrap();
        let mut s = LabelStore::open(dir.path().join("labels")).unwrap();
        s.register("img_1", 100, 50);
        (dir, s)
    }

    fn labels(rev: u64, rect: Rect) -> LabelSet {
        LabelSet {
            sample_id: "img_1".into(),
            revision: rev,
            annotator: "tester".into(),
            boxes: vec![BoundingBox::new("can", rect).with_source(BoxSource::Human)],
        }
    }

    #[test]
    fn first_write_is_revision_one() {
        let (_d, s) = store();
        assert_eq!(s.write(&labels(0, Rect::new(1.0, 1.0, 5.0, 5.0))).unwrap(), 1);
        assert_eq!(s.write(&labels(1, Rect::new(1.0, 1.0, 6.0, 5.0))).unwrap(), 2);
    }

    #[test]
    fn stale_revision_conflicts_and_leaves_store() {
        let (_d, s) = store();
        s.write(&labels(0, Rect::new(1.0, 1.0, 5.0, 5.0))).unwrap();
        let before = s.read("img_1").unwrap();
        let err = s.write(&labels(0, Rect::new(2.0, 2.0, 3.0, 3.0))).unwrap_err();
        assert!(matches!(err, Error::RevisionConflict { current: 1, .. }));
        assert_eq!(s.read("img_1").unwrap(), before);
    }

    #[test]
    fn invalid_box_rejected() {
        let (_d, s) = store();
        let err = s.write(&labels(0, Rect::new(5.0, 1.0, 5.0, 4.0))).unwrap_err();
        assert!(matches!(err, Error::InvalidBox { index: 0, .. }));
        assert_eq!(s.revision("img_1").unwrap(), 0);
    }

    #[test]
    fn unknown_sample() {
        let (_d, s) = store();
        let mut l = labels(0, Rect::new(1.0, 1.0, 5.0, 5.0));
        l.sample_id = "other".into();
        assert!(matches!(s.write(&l), Err(Error::UnknownSample(_))));
    }

    #[test]
    fn round_trip_is_exact() {
        let (_d, s) = store();
        let l = labels(0, Rect::new(0.1 + 0.2, 1.0 / 3.0, 7.123456789012345, 49.99999999999999));
        s.write(&l).unwrap();
        let back = s.read("img_1").unwrap().unwrap();
        assert_eq!(back.boxes, l.boxes);
    }

    #[test]
    fn ids_are_escaped() {
        assert_eq!(file_stem("a/b c"), "a%2Fb%20c");
        assert_eq!(file_stem("..x"), "%2E.x");
    }
}
