//! Synthetic corpus generator for desk-scale runs.
//!
//! Each image shows one of several scenes (a background hue with a little
//! texture) holding a handful of non-overlapping coloured objects, one
//! colour per class. The per-image noise level varies so that entropies
//! differ within a scene. Layout written under the output directory:
//!
//! ```text
//! images/<id>.png
//! gt/<id>.json          hidden ground truth
//! train.jsonl           unlabeled training pool
//! train_gt.jsonl        the same pool with ground-truth labels
//! test.jsonl            test set with ground-truth labels
//! config.json           run config using the synthetic detector
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AnnotationMode, ClusteringOptions, DetectorSpec, RunConfig};
use crate::detector::SyntheticDetectorConfig;
use crate::error::{Error, Result};
use crate::gram::AlphaPolicy;
use crate::manifest::{Manifest, ManifestEntry, Purpose};
use crate::model::{BoundingBox, BoxSource, LabelSet, Rect};
use crate::selection::SelectionConfig;
use crate::self_labeling::ScoringConfig;
use crate::store::{file_stem, LabelStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub n_scenes: usize,
    pub width: u32,
    pub height: u32,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_train: 600,
            n_test: 200,
            n_classes: 6,
            n_scenes: 6,
            width: 96,
            height: 72,
            max_objects: 7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub dir: PathBuf,
    pub classes: Vec<String>,
    pub config_path: PathBuf,
}

// Background hues chosen to fall in different hue bins.
const SCENE_HUES: [f64; 8] = [12.0, 35.0, 60.0, 115.0, 178.0, 235.0, 283.0, 330.0];

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn class_colour(class: usize, n: usize) -> [f64; 3] {
    let v = if class % 2 == 0 { 0.95 } else { 0.55 };
    hsv_to_rgb(360.0 * class as f64 / n as f64 + 20.0, 0.3, v)
}

struct Drawn {
    image: RgbImage,
    boxes: Vec<BoundingBox>,
}

fn draw_sample(cfg: &ScenarioConfig, classes: &[String], id: &str, scene: usize) -> Drawn {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ cfg.seed;
    for b in id.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let (w, ht) = (cfg.width as f64, cfg.height as f64);

    let n_obj = rng.random_range(1..=cfg.max_objects);
    let mut boxes: Vec<(usize, Rect)> = Vec::new();
    for _ in 0..n_obj {
        for _attempt in 0..60 {
            let bw = rng.random_range(0.12..0.28) * w;
            let bh = rng.random_range(0.14..0.34) * ht;
            let x = rng.random_range(0.0..(w - bw)).floor();
            let y = rng.random_range(0.0..(ht - bh)).floor();
            let r = Rect::new(x, y, (x + bw).floor(), (y + bh).floor());
            let clear = boxes.iter().all(|(_, o)| {
                r.x_max + 1.0 <= o.x_min || o.x_max + 1.0 <= r.x_min || r.y_max + 1.0 <= o.y_min || o.y_max + 1.0 <= r.y_min
            });
            if clear {
                boxes.push((rng.random_range(0..classes.len()), r));
                break;
            }
        }
    }

    let bg = hsv_to_rgb(SCENE_HUES[scene % SCENE_HUES.len()], 0.75, 0.7);
    let noise = rng.random_range(2.0..60.0);
    let mut image = RgbImage::new(cfg.width, cfg.height);
    for (px, py, p) in image.enumerate_pixels_mut() {
        let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
        let mut base = bg;
        for (class, r) in &boxes {
            if fx >= r.x_min && fx < r.x_max && fy >= r.y_min && fy < r.y_max {
                base = class_colour(*class, classes.len());
            }
        }
        let n: f64 = rng.random_range(-1.0..1.0) * noise;
        *p = Rgb(base.map(|c| (c + n).round().clamp(0.0, 255.0) as u8));
    }

    Drawn {
        image,
        boxes: boxes
            .into_iter()
            .map(|(c, r)| BoundingBox::new(classes[c].clone(), r).with_source(BoxSource::HiddenGt))
            .collect(),
    }
}

/// Writes a scenario under `dir` and returns where things went. The run
/// config uses the synthetic detector with default parameters.
pub fn generate(dir: &Path, cfg: &ScenarioConfig) -> Result<Scenario> {
    if cfg.n_classes == 0 || cfg.n_scenes == 0 || cfg.max_objects == 0 || cfg.n_train < 3 {
        return Err(Error::invalid("scenario needs classes, scenes, objects and at least 3 training images"));
    }
    if cfg.width < 32 || cfg.height < 32 {
        return Err(Error::invalid("scenario images must be at least 32x32"));
    }
    let classes: Vec<String> = (0..cfg.n_classes).map(|c| format!("class_{c}")).collect();
    fs::create_dir_all(dir.join("images"))?;
    let mut gt = LabelStore::open(dir.join("gt"))?;

    let ids: Vec<(String, usize, bool)> = (0..cfg.n_train)
        .map(|i| (format!("train_{i:04}"), i, false))
        .chain((0..cfg.n_test).map(|i| (format!("test_{i:04}"), i, true)))
        .collect();
    let drawn: Vec<Drawn> = ids
        .par_iter()
        .map(|(id, i, _)| {
            let scene = (i * 7 + 3) % cfg.n_scenes;
            let d = draw_sample(cfg, &classes, id, scene);
            d.image
                .save(dir.join("images").join(format!("{}.png", file_stem(id))))
                .map_err(|source| Error::Image {
                    path: dir.join("images"),
                    source,
                })?;
            Ok(d)
        })
        .collect::<Result<_>>()?;

    let mut train = Vec::new();
    let mut train_gt = Vec::new();
    let mut test = Vec::new();
    for ((id, _, is_test), d) in ids.iter().zip(drawn) {
        gt.register(id, cfg.width, cfg.height);
        gt.write(&LabelSet::new(id, "scenario", d.boxes))?;
        let image = PathBuf::from("images").join(format!("{}.png", file_stem(id)));
        let labels = PathBuf::from("gt").join(format!("{}.json", file_stem(id)));
        let labeled = ManifestEntry {
            id: id.clone(),
            image: image.clone(),
            labels: Some(labels),
        };
        if *is_test {
            test.push(labeled);
        } else {
            train.push(ManifestEntry {
                id: id.clone(),
                image,
                labels: None,
            });
            train_gt.push(labeled);
        }
    }
    Manifest::new(Purpose::Unlabeled, train)?.write(&dir.join("train.jsonl"))?;
    Manifest::new(Purpose::Train, train_gt)?.write(&dir.join("train_gt.jsonl"))?;
    Manifest::new(Purpose::Test, test)?.write(&dir.join("test.jsonl"))?;

    let run = RunConfig {
        train_manifest: "train.jsonl".into(),
        test_manifest: "test.jsonl".into(),
        full_manifest: Some("train_gt.jsonl".into()),
        ground_truth_dir: Some("gt".into()),
        work_dir: "work".into(),
        seed: cfg.seed,
        selection: SelectionConfig::default(),
        scoring: ScoringConfig::default(),
        clustering: ClusteringOptions::default(),
        detector: DetectorSpec::Synthetic(SyntheticDetectorConfig {
            seed: cfg.seed,
            classes: classes.clone(),
            ..Default::default()
        }),
        alpha: AlphaPolicy::default(),
        annotation: AnnotationMode::Oracle,
        review_mode: false,
        max_iterations: 100,
        gate_timeout_secs: 24 * 3600,
    };
    let config_path = dir.join("config.json");
    run.write(&config_path)?;
    Ok(Scenario {
        dir: dir.to_path_buf(),
        classes,
        config_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::load_manifest;

    #[test]
    fn small_scenario_is_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ScenarioConfig {
            n_train: 12,
            n_test: 4,
            ..Default::default()
        };
        let s = generate(dir.path(), &cfg).unwrap();
        let train = load_manifest(&dir.path().join("train.jsonl")).unwrap();
        let test = load_manifest(&dir.path().join("test.jsonl")).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(test.len(), 4);
        assert!(train.entries.iter().all(|e| e.labels.is_none()));
        for e in &test.entries {
            let l = crate::store::read_label_file(e.labels.as_ref().unwrap()).unwrap().unwrap();
            assert!(!l.boxes.is_empty());
            l.validate(cfg.width, cfg.height).unwrap();
        }
        let c = RunConfig::load(&s.config_path).unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = ScenarioConfig {
            n_train: 5,
            n_test: 1,
            ..Default::default()
        };
        generate(a.path(), &cfg).unwrap();
        generate(b.path(), &cfg).unwrap();
        for f in ["train.jsonl", "images/train_0003.png", "gt/test_0000.json", "config.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }
}
