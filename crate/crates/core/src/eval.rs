//! IoU and VOC-style all-point average precision at a single IoU threshold.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, Detection, Rect};

pub const IOU_THRESHOLD: f64 = 0.5;

/// IoU of two rectangles; 0 when disjoint or when the union is empty.
pub fn rect_iou(a: &Rect, b: &Rect) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    for r in [&a.rect, &b.rect] {
        if !r.is_proper() {
            return Err(Error::invalid(format!(
                "degenerate box [{}, {}, {}, {}]",
                r.x_min, r.y_min, r.x_max, r.y_max
            )));
        }
    }
    Ok(rect_iou(&a.rect, &b.rect))
}

/// Per-sample boxes keyed by sample id.
pub type BoxesBySample = BTreeMap<String, Vec<BoundingBox>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

struct ClassOutcome {
    ap: f64,
    counts: MatchCounts,
}

fn class_outcome(predictions: &BoxesBySample, ground_truth: &BoxesBySample, class: &str, thresh: f64) -> Result<ClassOutcome> {
    let mut gt: BTreeMap<&str, Vec<(&Rect, bool)>> = BTreeMap::new();
    let mut n_gt = 0usize;
    for (id, boxes) in ground_truth {
        let v: Vec<_> = boxes
            .iter()
            .filter(|b| b.class_name == class)
            .map(|b| (&b.rect, false))
            .collect();
        n_gt += v.len();
        gt.insert(id.as_str(), v);
    }
    if n_gt == 0 {
        return Err(Error::UnknownClass(class.to_string()));
    }

    // (confidence, sample, order within sample)
    let mut preds: Vec<(f64, &str, usize, &Rect)> = predictions
        .iter()
        .flat_map(|(id, boxes)| {
            boxes
                .iter()
                .enumerate()
                .filter(|(_, b)| b.class_name == class)
                .map(move |(i, b)| (b.confidence, id.as_str(), i, &b.rect))
        })
        .collect();
    preds.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)).then_with(|| a.2.cmp(&b.2)));

    let mut hits = Vec::with_capacity(preds.len());
    for (_, id, _, rect) in &preds {
        let hit = match gt.get_mut(id) {
            Some(candidates) if !candidates.is_empty() => {
                let mut best = 0usize;
                let mut best_iou = -1.0;
                for (i, (g, _)) in candidates.iter().enumerate() {
                    let v = rect_iou(rect, g);
                    if v > best_iou {
                        best_iou = v;
                        best = i;
                    }
                }
                if best_iou >= thresh && !candidates[best].1 {
                    candidates[best].1 = true;
                    true
                } else {
                    false
                }
            }
            _ => false,
        };
        hits.push(hit);
    }

    let tp_total = hits.iter().filter(|&&h| h).count();
    let counts = MatchCounts {
        tp: tp_total,
        fp: hits.len() - tp_total,
        fn_: n_gt - tp_total,
    };

    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // monotone envelope from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Ok(ClassOutcome { ap, counts })
}

/// All-point interpolated AP of `class`. A prediction is a true positive when
/// its best-overlapping ground-truth box of the same class in the same sample
/// has IoU >= `iou_thresh` and is still unmatched. Confidence ties are ranked
/// by sample id, then by position within the sample.
pub fn average_precision(predictions: &BoxesBySample, ground_truth: &BoxesBySample, class: &str, iou_thresh: f64) -> Result<f64> {
    Ok(class_outcome(predictions, ground_truth, class, iou_thresh)?.ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: BTreeMap<String, f64>,
    pub map: f64,
    pub counts: MatchCounts,
}

/// Per-class AP and mAP over the classes present in the ground truth.
/// Predictions of classes absent from the ground truth are ignored.
pub fn evaluate(predictions: &BoxesBySample, ground_truth: &BoxesBySample) -> Result<EvalResult> {
    for id in ground_truth.keys() {
        if !predictions.contains_key(id) {
            return Err(Error::invalid(format!("no predictions for test sample {id:?}")));
        }
    }
    for id in predictions.keys() {
        if !ground_truth.contains_key(id) {
            return Err(Error::invalid(format!("prediction for {id:?} which is not in the test set")));
        }
    }
    let classes: BTreeSet<&str> = ground_truth.values().flatten().map(|b| b.class_name.as_str()).collect();
    if classes.is_empty() {
        return Err(Error::invalid("ground truth has no objects"));
    }
    let mut per_class = BTreeMap::new();
    let mut counts = MatchCounts::default();
    for class in classes {
        let o = class_outcome(predictions, ground_truth, class, IOU_THRESHOLD)?;
        counts.tp += o.counts.tp;
        counts.fp += o.counts.fp;
        counts.fn_ += o.counts.fn_;
        per_class.insert(class.to_string(), o.ap);
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(EvalResult { per_class, map, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    D1,
    D2,
}

/// Both heads evaluated; the headline is the better one (D1 on ties).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEval {
    pub d1: EvalResult,
    pub d2: EvalResult,
}

impl HeadEval {
    pub fn best_head(&self) -> Head {
        if self.d2.map > self.d1.map {
            Head::D2
        } else {
            Head::D1
        }
    }

    pub fn best(&self) -> &EvalResult {
        match self.best_head() {
            Head::D1 => &self.d1,
            Head::D2 => &self.d2,
        }
    }

    pub fn map(&self) -> f64 {
        self.best().map
    }

    /// The `eval.json` document.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "per_class": self.best().per_class,
            "map": self.map(),
            "head": self.best_head(),
        })
    }
}

/// `a - b` per class and for mAP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDiff {
    pub per_class: BTreeMap<String, f64>,
    pub map: f64,
}

pub fn diff(a: &EvalResult, b: &EvalResult) -> EvalDiff {
    let per_class = a
        .per_class
        .iter()
        .filter_map(|(c, ap)| b.per_class.get(c).map(|bp| (c.clone(), ap - bp)))
        .collect();
    EvalDiff {
        per_class,
        map: a.map - b.map,
    }
}

/// Groups detections by sample, preserving their order.
pub fn by_sample<'a>(items: impl IntoIterator<Item = (&'a str, &'a [Detection])>) -> BoxesBySample {
    items.into_iter().map(|(id, d)| (id.to_string(), d.to_vec())).collect()
}

/// One-to-one agreement between a label set and the truth of one sample:
/// same class, IoU >= `iou_thresh`, greedy by descending IoU.
pub fn match_labels(labels: &[BoundingBox], truth: &[BoundingBox], iou_thresh: f64) -> MatchCounts {
    let mut cand = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            if l.class_name == t.class_name {
                let v = rect_iou(&l.rect, &t.rect);
                if v >= iou_thresh {
                    cand.push((v, i, j));
                }
            }
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_l = vec![false; labels.len()];
    let mut used_t = vec![false; truth.len()];
    let mut tp = 0;
    for (_, i, j) in cand {
        if !used_l[i] && !used_t[j] {
            used_l[i] = true;
            used_t[j] = true;
            tp += 1;
        }
    }
    MatchCounts {
        tp,
        fp: labels.len() - tp,
        fn_: truth.len() - tp,
    }
}
