//! Deterministic stand-in for a trained two-headed detector.
//!
//! The detector sees the hidden ground truth of every sample and degrades it
//! according to a single skill value. Skill grows with the effective number
//! of labeled training samples, where each sample counts by how well its
//! labels agree with the hidden truth:
//!
//! ```text
//! net    = TP - noise * FP - miss * FN
//! q      = clamp(net, 0, n_gt) / unit          (objects_per_unit > 0)
//!        = clamp(net / max(n_gt, 1), 0, 1)     (otherwise)
//! skill  = s_min + (s_max - s_min) * (1 - exp(-sum(q) / tau))
//! ```
//!
//! A correctly empty label set counts as one object.
//!
//! All randomness is drawn from streams keyed by (seed, sample id, object
//! slot), so predictions are a pure function of config, skill and manifest,
//! and every variate moves a prediction monotonically toward the truth as
//! skill rises. For each object a coin decides whether the two heads share
//! their variates (probability `rho`) or draw their own.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Detector, FeaturePair, TrainingReport};
use crate::error::{Error, Result};
use crate::eval::{match_labels, rect_iou, MatchCounts};
use crate::gram::{gram_loss, FeatureMap};
use crate::manifest::Manifest;
use crate::model::{BoundingBox, Detection, LabelSet, Rect};
use crate::self_labeling::PredictionPair;
use crate::store::{file_stem, read_label_file};

const FP_SLOTS: u64 = 4;
const NMS_IOU: f64 = 0.5;
const FEATURE_SHAPE: (usize, usize, usize) = (4, 4, 8);
const GRAM_SAMPLES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDetectorConfig {
    pub s_min: f64,
    pub s_max: f64,
    pub tau: f64,
    pub rho: f64,
    /// Expected false positives per image at zero skill.
    pub fp_rate: f64,
    pub seed: u64,
    /// Class vocabulary used for confusions and false positives.
    pub classes: Vec<String>,
    /// Probability of a wrong class at zero skill.
    pub confusion_rate: f64,
    /// Confidence of a detection is `skill + (1 - skill) * (shift + spread * z)`.
    pub confidence_shift: f64,
    pub confidence_spread: f64,
    /// Subtracted from `shift` for a wrongly classified detection.
    pub confusion_confidence_drop: f64,
    pub fp_confidence_mean: f64,
    pub fp_confidence_spread: f64,
    /// Weight of a wrong box against a correct one in label quality.
    pub label_noise_penalty: f64,
    /// Weight of an unlabeled object against a correct box.
    pub label_miss_penalty: f64,
    /// When positive, quality counts objects rather than images: a sample
    /// contributes its net correct boxes divided by this many.
    pub objects_per_unit: f64,
}

impl Default for SyntheticDetectorConfig {
    fn default() -> Self {
        Self {
            s_min: 0.5,
            s_max: 0.97,
            tau: 150.0,
            rho: 0.2,
            fp_rate: 1.5,
            seed: 0,
            classes: Vec::new(),
            confusion_rate: 0.3,
            confidence_shift: 0.85,
            confidence_spread: 0.2,
            confusion_confidence_drop: 0.1,
            fp_confidence_mean: 0.45,
            fp_confidence_spread: 0.25,
            label_noise_penalty: 5.0,
            label_miss_penalty: 0.0,
            objects_per_unit: 4.0,
        }
    }
}

impl SyntheticDetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        unit("s_min", self.s_min)?;
        unit("s_max", self.s_max)?;
        unit("rho", self.rho)?;
        unit("confusion_rate", self.confusion_rate)?;
        if self.s_min > self.s_max {
            return Err(Error::invalid(format!("s_min {} exceeds s_max {}", self.s_min, self.s_max)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid("tau must be positive"));
        }
        if !(0.0..=FP_SLOTS as f64).contains(&self.fp_rate) {
            return Err(Error::invalid(format!("fp_rate must lie in [0, {FP_SLOTS}]")));
        }
        if !(self.label_noise_penalty >= 0.0) || !(self.label_miss_penalty >= 0.0) || !(self.objects_per_unit >= 0.0) {
            return Err(Error::invalid("label penalties and objects_per_unit must be non-negative"));
        }
        Ok(())
    }

    pub fn skill_for(&self, n_effective: f64) -> f64 {
        self.s_min + (self.s_max - self.s_min) * (1.0 - (-n_effective / self.tau).exp())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDetector {
    cfg: SyntheticDetectorConfig,
    gt_dir: PathBuf,
    skill: f64,
    n_effective: f64,
    truth: BTreeMap<String, LabelSet>,
    sizes: BTreeMap<PathBuf, (u32, u32)>,
}

/// Variates of one head for one object.
#[derive(Debug, Clone, Copy)]
struct Draw {
    detect: f64,
    confuse: f64,
    pick: f64,
    jitter: [f64; 4],
    z: f64,
}

impl Draw {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            detect: rng.random(),
            confuse: rng.random(),
            pick: rng.random(),
            jitter: [rng.random(), rng.random(), rng.random(), rng.random()],
            z: rng.sample(StandardNormal),
        }
    }
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for &b in *p {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn stream(seed: u64, tag: &str, id: &str, slot: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(&[&seed.to_le_bytes(), tag.as_bytes(), id.as_bytes(), &slot.to_le_bytes()]))
}

/// Per-class greedy NMS keeping the higher confidence; ties keep the
/// earlier box.
fn nms(dets: Vec<Detection>) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut keep = vec![false; dets.len()];
    for (pos, &i) in order.iter().enumerate() {
        let suppressed = order[..pos]
            .iter()
            .any(|&j| keep[j] && dets[j].class_name == dets[i].class_name && rect_iou(&dets[i].rect, &dets[j].rect) > NMS_IOU);
        keep[i] = !suppressed;
    }
    dets.into_iter().zip(keep).filter_map(|(d, k)| k.then_some(d)).collect()
}

impl SyntheticDetector {
    /// `gt_dir` holds one hidden ground-truth label file per sample, named
    /// like the label store's files.
    pub fn new(cfg: SyntheticDetectorConfig, gt_dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let skill = cfg.s_min;
        Ok(Self {
            cfg,
            gt_dir: gt_dir.into(),
            skill,
            n_effective: 0.0,
            truth: BTreeMap::new(),
            sizes: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &SyntheticDetectorConfig {
        &self.cfg
    }

    pub fn skill(&self) -> f64 {
        self.skill
    }

    pub fn n_effective(&self) -> f64 {
        self.n_effective
    }

    pub fn set_skill(&mut self, skill: f64) {
        self.skill = skill.clamp(0.0, 1.0);
    }

    /// Label quality of one labeled sample against its hidden truth.
    pub fn label_quality(&self, labels: &[BoundingBox], truth: &[BoundingBox]) -> f64 {
        let unit = self.cfg.objects_per_unit;
        if truth.is_empty() && labels.is_empty() {
            return if unit > 0.0 { 1.0 / unit } else { 1.0 };
        }
        let MatchCounts { tp, fp, fn_ } = match_labels(labels, truth, 0.5);
        let net = tp as f64 - self.cfg.label_noise_penalty * fp as f64 - self.cfg.label_miss_penalty * fn_ as f64;
        let n = truth.len().max(1) as f64;
        if unit > 0.0 {
            net.clamp(0.0, n) / unit
        } else {
            (net / n).clamp(0.0, 1.0)
        }
    }

    pub fn truth(&mut self, id: &str) -> Result<&LabelSet> {
        if !self.truth.contains_key(id) {
            let path = self.gt_dir.join(format!("{}.json", file_stem(id)));
            let labels = read_label_file(&path)?.ok_or(Error::MissingFile(path))?;
            self.truth.insert(id.to_string(), labels);
        }
        Ok(&self.truth[id])
    }

    fn image_size(&mut self, image: &Path) -> Result<(u32, u32)> {
        if let Some(&s) = self.sizes.get(image) {
            return Ok(s);
        }
        let s = image::image_dimensions(image).map_err(|source| Error::Image {
            path: image.to_path_buf(),
            source,
        })?;
        self.sizes.insert(image.to_path_buf(), s);
        Ok(s)
    }

    /// Both heads' detections for one sample at the current skill.
    pub fn predict_sample(&mut self, id: &str, image: &Path) -> Result<PredictionPair> {
        let (w, h) = self.image_size(image)?;
        let truth = self.truth(id)?.boxes.clone();
        let cfg = &self.cfg;
        let s = self.skill;
        let (w, h) = (w as f64, h as f64);
        let mut heads: [Vec<Detection>; 2] = [Vec::new(), Vec::new()];

        for (k, gt) in truth.iter().enumerate() {
            let mut rng = stream(cfg.seed, "object", id, k as u64);
            let shared_coin: f64 = rng.random();
            let shared = Draw::sample(&mut rng);
            let own = [Draw::sample(&mut rng), Draw::sample(&mut rng)];
            for (head, out) in heads.iter_mut().enumerate() {
                let d = if shared_coin < cfg.rho { shared } else { own[head] };
                if d.detect >= s {
                    continue;
                }
                let wrong = d.confuse < cfg.confusion_rate * (1.0 - s);
                let class_name = if wrong { self.other_class(&gt.class_name, d.pick) } else { None };
                let wrong = class_name.is_some();
                let class_name = class_name.unwrap_or_else(|| gt.class_name.clone());
                let r = gt.rect;
                let amp = 0.1 * (1.0 - s);
                let (bw, bh) = (r.width(), r.height());
                let rect = Rect::new(
                    r.x_min + (2.0 * d.jitter[0] - 1.0) * amp * bw,
                    r.y_min + (2.0 * d.jitter[1] - 1.0) * amp * bh,
                    r.x_max + (2.0 * d.jitter[2] - 1.0) * amp * bw,
                    r.y_max + (2.0 * d.jitter[3] - 1.0) * amp * bh,
                )
                .clamp_to(w, h);
                let shift = cfg.confidence_shift - if wrong { cfg.confusion_confidence_drop } else { 0.0 };
                let conf = (s + (1.0 - s) * (shift + cfg.confidence_spread * d.z)).clamp(0.0, 1.0);
                if rect.is_proper() {
                    out.push(BoundingBox::new(class_name, rect).with_confidence(conf));
                }
            }
        }

        let p_fp = cfg.fp_rate * (1.0 - s) / FP_SLOTS as f64;
        if !cfg.classes.is_empty() && p_fp > 0.0 {
            for slot in 0..FP_SLOTS {
                let mut rng = stream(cfg.seed, "false-positive", id, slot);
                let shared_coin: f64 = rng.random();
                let draws: Vec<[f64; 7]> = (0..3)
                    .map(|_| {
                        let mut a = [0.0; 7];
                        for v in a.iter_mut().take(6) {
                            *v = rng.random();
                        }
                        a[6] = rng.sample(StandardNormal);
                        a
                    })
                    .collect();
                for (head, out) in heads.iter_mut().enumerate() {
                    let d = if shared_coin < cfg.rho { draws[0] } else { draws[1 + head] };
                    if d[0] >= p_fp {
                        continue;
                    }
                    let class_name = cfg.classes[((d[1] * cfg.classes.len() as f64) as usize).min(cfg.classes.len() - 1)].clone();
                    let bw = w * (0.1 + 0.2 * d[2]);
                    let bh = h * (0.1 + 0.2 * d[3]);
                    let x = (w - bw) * d[4];
                    let y = (h - bh) * d[5];
                    let conf = (cfg.fp_confidence_mean + cfg.fp_confidence_spread * d[6]).clamp(0.0, 1.0);
                    out.push(BoundingBox::new(class_name, Rect::new(x, y, x + bw, y + bh)).with_confidence(conf));
                }
            }
        }

        let [a1, a2] = heads;
        Ok(PredictionPair {
            sample_id: id.to_string(),
            a1: nms(a1),
            a2: nms(a2),
        })
    }

    fn other_class(&self, truth: &str, pick: f64) -> Option<String> {
        let others: Vec<&String> = self.cfg.classes.iter().filter(|c| c.as_str() != truth).collect();
        if others.is_empty() {
            return None;
        }
        let i = ((pick * others.len() as f64) as usize).min(others.len() - 1);
        Some(others[i].clone())
    }

    /// ROI features of both heads: a common component weighted by
    /// `sqrt(rho)` plus a head-specific one weighted by `sqrt(1 - rho)`.
    pub fn features(&self, id: &str) -> Result<FeaturePair> {
        let (m, n, c) = FEATURE_SHAPE;
        let len = m * n * c;
        let mut rng = stream(self.cfg.seed, "features", id, 0);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..len).map(|_| rng.sample(StandardNormal)).collect() };
        let base = draw(&mut rng);
        let o1 = draw(&mut rng);
        let o2 = draw(&mut rng);
        let (a, b) = (self.cfg.rho.sqrt(), (1.0 - self.cfg.rho).sqrt());
        let mix = |o: &[f64]| -> Vec<f64> { base.iter().zip(o).map(|(x, y)| a * x + b * y).collect() };
        Ok(FeaturePair {
            sample_id: id.to_string(),
            d1: FeatureMap::convolutional(m, n, c, mix(&o1))?,
            d2: FeatureMap::convolutional(m, n, c, mix(&o2))?,
        })
    }
}

impl Detector for SyntheticDetector {
    fn train(&mut self, train: &Manifest, _work_dir: &Path) -> Result<TrainingReport> {
        let mut n_eff = 0.0;
        let mut gram_ids = Vec::new();
        for e in &train.entries {
            let Some(path) = &e.labels else { continue };
            let Some(labels) = read_label_file(path)? else { continue };
            let truth = self.truth(&e.id)?.boxes.clone();
            n_eff += self.label_quality(&labels.boxes, &truth);
            if gram_ids.len() < GRAM_SAMPLES {
                gram_ids.push(e.id.clone());
            }
        }
        self.n_effective = n_eff;
        self.skill = self.cfg.skill_for(n_eff);
        let gram_loss = if gram_ids.is_empty() || self.cfg.rho >= 1.0 {
            None
        } else {
            let mut total = 0.0;
            for id in &gram_ids {
                let f = self.features(id)?;
                total += gram_loss(&f.d1, &f.d2)?.value;
            }
            Some(total / gram_ids.len() as f64)
        };
        let loss = 2.0 * (1.0 - self.skill);
        Ok(TrainingReport {
            loss_d1: loss,
            loss_d2: loss,
            gram_loss,
            epochs: 1,
        })
    }

    fn predict(&mut self, manifest: &Manifest, _work_dir: &Path) -> Result<Vec<PredictionPair>> {
        manifest
            .entries
            .iter()
            .map(|e| self.predict_sample(&e.id, &e.image))
            .collect()
    }

    fn report_features(&mut self, manifest: &Manifest, _work_dir: &Path) -> Result<Vec<FeaturePair>> {
        manifest.entries.iter().map(|e| self.features(&e.id)).collect()
    }
}
