//! Pseudo-label agreement scoring, per-cluster thresholds and pool updates.
//!
//! A sample's score is the number of objects both heads found with
//! confidence above `delta_acc` and mutual IoU above `delta_iou`. Within
//! cluster `k` the threshold is `beta` times the mean score of the samples
//! still unlabeled there, and samples strictly above it join the training
//! pool with the agreed boxes as labels.
//!
//! Matching is greedy per class by descending IoU. When each head's output
//! has been non-maximum suppressed at IoU `t` and `delta_iou >= (1 + t) / 2`,
//! a box can have at most one partner above `delta_iou` (IoU distance obeys
//! the triangle inequality), greedy matching pairs every such partner, and
//! the score equals the maximum over all one-to-one matchings. Independently
//! of thresholds, the greedy total IoU is at least half of the optimum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::rect_iou;
use crate::model::{BoundingBox, BoxSource, Detection};

/// Both heads' detections on one sample; the `predict` wire record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPair {
    #[serde(rename = "id")]
    pub sample_id: String,
    #[serde(rename = "d1")]
    pub a1: Vec<Detection>,
    #[serde(rename = "d2")]
    pub a2: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub class_name: String,
    pub box_a1: BoundingBox,
    pub box_a2: BoundingBox,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub delta_acc: f64,
    pub delta_iou: f64,
    pub beta: f64,
    pub termination_fraction: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            delta_acc: 0.9,
            delta_iou: 0.75,
            beta: 1.0,
            termination_fraction: 0.01,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} must lie in (0, 1)")))
            }
        };
        open_unit("delta_acc", self.delta_acc)?;
        open_unit("delta_iou", self.delta_iou)?;
        open_unit("termination_fraction", self.termination_fraction)?;
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid(format!("beta = {} must be positive", self.beta)));
        }
        Ok(())
    }
}

/// Greedy one-to-one matching within each class by descending IoU; ties go
/// to the lowest `(a1 index, a2 index)`. Pairs with IoU 0 never match.
pub fn match_pairs(pair: &PredictionPair) -> Vec<MatchedPair> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in pair.a1.iter().enumerate() {
        for (j, b) in pair.a2.iter().enumerate() {
            if a.class_name == b.class_name {
                let v = rect_iou(&a.rect, &b.rect);
                if v > 0.0 {
                    candidates.push((v, i, j));
                }
            }
        }
    }
    candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used1 = vec![false; pair.a1.len()];
    let mut used2 = vec![false; pair.a2.len()];
    let mut out = Vec::new();
    for (v, i, j) in candidates {
        if used1[i] || used2[j] {
            continue;
        }
        used1[i] = true;
        used2[j] = true;
        out.push(MatchedPair {
            class_name: pair.a1[i].class_name.clone(),
            box_a1: pair.a1[i].clone(),
            box_a2: pair.a2[j].clone(),
            iou: v,
        });
    }
    out
}

pub fn is_valid(m: &MatchedPair, cfg: &ScoringConfig) -> bool {
    m.box_a1.confidence > cfg.delta_acc && m.box_a2.confidence > cfg.delta_acc && m.iou > cfg.delta_iou
}

pub fn valid_pairs(pair: &PredictionPair, cfg: &ScoringConfig) -> Vec<MatchedPair> {
    match_pairs(pair).into_iter().filter(|m| is_valid(m, cfg)).collect()
}

/// Number of matched objects passing all three strict thresholds.
pub fn score(pair: &PredictionPair, cfg: &ScoringConfig) -> u32 {
    valid_pairs(pair, cfg).len() as u32
}

/// `beta * mean(scores)` over the samples still unlabeled in one cluster.
pub fn cluster_threshold(scores: &[u32], beta: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("cluster has no remaining samples"));
    }
    let sum: u64 = scores.iter().map(|&s| s as u64).sum();
    Ok(beta / scores.len() as f64 * sum as f64)
}

/// Pseudo-labels for one accepted sample: the more confident box of each
/// valid pair (head 1 on ties), tagged as self-labeled.
pub fn committed_boxes(pair: &PredictionPair, cfg: &ScoringConfig) -> Vec<BoundingBox> {
    valid_pairs(pair, cfg)
        .into_iter()
        .map(|m| {
            let chosen = if m.box_a2.confidence > m.box_a1.confidence {
                m.box_a2
            } else {
                m.box_a1
            };
            chosen.with_source(BoxSource::SelfLabel)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterDelta {
    pub sigma: f64,
    pub added: usize,
    pub remaining: usize,
}

/// Outcome of scoring one round of predictions; applied by the session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoolDelta {
    pub scores: BTreeMap<String, u32>,
    pub clusters: BTreeMap<usize, ClusterDelta>,
    /// Accepted samples with their pseudo-labels, in sample-id order.
    pub accepted: Vec<(String, Vec<BoundingBox>)>,
}

impl PoolDelta {
    pub fn added(&self) -> usize {
        self.accepted.len()
    }

    pub fn remaining(&self) -> usize {
        self.clusters.values().map(|c| c.remaining).sum()
    }

    pub fn sigma(&self) -> BTreeMap<usize, f64> {
        self.clusters.iter().map(|(&k, c)| (k, c.sigma)).collect()
    }
}

/// Scores every unlabeled sample and picks those strictly above their
/// cluster's threshold. `unlabeled` maps sample id to cluster id; every one
/// of them needs a prediction.
pub fn plan_pool_update(
    unlabeled: &BTreeMap<String, usize>,
    predictions: &BTreeMap<String, PredictionPair>,
    cfg: &ScoringConfig,
) -> Result<PoolDelta> {
    cfg.validate()?;
    let mut by_cluster: BTreeMap<usize, Vec<(&str, u32)>> = BTreeMap::new();
    let mut delta = PoolDelta::default();
    for (id, &cluster) in unlabeled {
        let pair = predictions
            .get(id)
            .ok_or_else(|| Error::invalid(format!("unlabeled sample {id:?} has no prediction")))?;
        let s = score(pair, cfg);
        delta.scores.insert(id.clone(), s);
        by_cluster.entry(cluster).or_default().push((id.as_str(), s));
    }
    for (cluster, members) in by_cluster {
        let scores: Vec<u32> = members.iter().map(|m| m.1).collect();
        let sigma = cluster_threshold(&scores, cfg.beta)?;
        let mut added = 0;
        for (id, s) in &members {
            if *s as f64 > sigma {
                delta.accepted.push((id.to_string(), committed_boxes(&predictions[*id], cfg)));
                added += 1;
            }
        }
        delta.clusters.insert(
            cluster,
            ClusterDelta {
                sigma,
                added,
                remaining: members.len() - added,
            },
        );
    }
    delta.accepted.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(delta)
}

/// True when the unlabeled pool has shrunk below `termination_fraction` of
/// its initial size, or when the last round added nothing.
pub fn should_terminate(initial_unlabeled: usize, remaining: usize, last_added: Option<usize>, cfg: &ScoringConfig) -> bool {
    (remaining as f64) < cfg.termination_fraction * initial_unlabeled as f64 || last_added == Some(0)
}

/// The per-iteration `scores.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationScores {
    pub iteration: usize,
    pub scores: BTreeMap<String, u32>,
    pub sigma: BTreeMap<usize, f64>,
    pub added: Vec<String>,
}

impl IterationScores {
    pub fn from_delta(iteration: usize, d: &PoolDelta) -> Self {
        Self {
            iteration,
            scores: d.scores.clone(),
            sigma: d.sigma(),
            added: d.accepted.iter().map(|a| a.0.clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Rect;

    fn det(class: &str, r: [f64; 4], conf: f64) -> Detection {
        BoundingBox::new(class, Rect::new(r[0], r[1], r[2], r[3])).with_confidence(conf)
    }

    fn pair(a1: Vec<Detection>, a2: Vec<Detection>) -> PredictionPair {
        PredictionPair {
            sample_id: "s".into(),
            a1,
            a2,
        }
    }

    fn cfg() -> ScoringConfig {
        ScoringConfig::default()
    }

    #[test]
    fn one_box_each_side() {
        // [0,0,10,10] vs [0,0,10,8]: IoU 0.8
        let p = pair(vec![det("c", [0.0, 0.0, 10.0, 10.0], 0.95)], vec![det("c", [0.0, 0.0, 10.0, 8.0], 0.92)]);
        let m = match_pairs(&p);
        assert_eq!(m.len(), 1);
        assert!((m[0].iou - 0.8).abs() < 1e-12);
        assert_eq!(score(&p, &cfg()), 1);

        let low = pair(vec![det("c", [0.0, 0.0, 10.0, 10.0], 0.95)], vec![det("c", [0.0, 0.0, 10.0, 8.0], 0.85)]);
        assert_eq!(score(&low, &cfg()), 0);
    }

    #[test]
    fn class_gate() {
        let p = pair(vec![det("a", [0.0, 0.0, 10.0, 10.0], 0.95)], vec![det("b", [0.0, 0.0, 10.0, 10.0], 0.95)]);
        assert!(match_pairs(&p).is_empty());
    }

    #[test]
    fn greedy_picks_diagonal() {
        // a1[0]/a2[0] nearly identical, a1[1]/a2[1] nearly identical, far apart
        let p = pair(
            vec![det("c", [0.0, 0.0, 10.0, 10.0], 0.95), det("c", [20.0, 0.0, 30.0, 10.0], 0.95)],
            vec![det("c", [0.0, 0.0, 10.0, 9.0], 0.95), det("c", [20.0, 0.0, 30.0, 8.0], 0.95)],
        );
        let m = match_pairs(&p);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].box_a1.rect.x_min, 0.0);
        assert_eq!(m[0].box_a2.rect.x_min, 0.0);
        assert_eq!(m[1].box_a1.rect.x_min, 20.0);
        assert_eq!(m[1].box_a2.rect.x_min, 20.0);
    }

    #[test]
    fn strict_thresholds() {
        let p = pair(vec![det("c", [0.0, 0.0, 10.0, 10.0], 0.9)], vec![det("c", [0.0, 0.0, 10.0, 10.0], 0.95)]);
        assert_eq!(score(&p, &cfg()), 0);
    }

    #[test]
    fn two_valid_one_invalid() {
        let p = pair(
            vec![
                det("c", [0.0, 0.0, 10.0, 10.0], 0.95),
                det("c", [20.0, 0.0, 30.0, 10.0], 0.95),
                det("d", [40.0, 0.0, 50.0, 10.0], 0.5),
            ],
            vec![
                det("c", [0.0, 0.0, 10.0, 10.0], 0.95),
                det("c", [20.0, 0.0, 30.0, 10.0], 0.97),
                det("d", [40.0, 0.0, 50.0, 10.0], 0.99),
            ],
        );
        assert_eq!(score(&p, &cfg()), 2);
        let committed = committed_boxes(&p, &cfg());
        assert_eq!(committed.len(), 2);
        assert_eq!(committed[1].confidence, 0.97);
        assert!(committed.iter().all(|b| b.source == Some(BoxSource::SelfLabel)));
    }

    #[test]
    fn thresholds() {
        assert_eq!(cluster_threshold(&[2, 4, 0], 1.0).unwrap(), 2.0);
        assert_eq!(cluster_threshold(&[2, 4, 0], 0.5).unwrap(), 1.0);
        assert_eq!(cluster_threshold(&[0, 0], 1.0).unwrap(), 0.0);
        assert!(cluster_threshold(&[], 1.0).is_err());
    }

    fn scored_pair(id: &str, n_valid: usize) -> PredictionPair {
        let boxes: Vec<Detection> = (0..n_valid)
            .map(|i| det("c", [i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0], 0.99))
            .collect();
        PredictionPair {
            sample_id: id.into(),
            a1: boxes.clone(),
            a2: boxes,
        }
    }

    #[test]
    fn pool_update_threshold() {
        let unl = BTreeMap::from([("a".to_string(), 0), ("b".to_string(), 0)]);
        let preds = BTreeMap::from([("a".to_string(), scored_pair("a", 2)), ("b".to_string(), scored_pair("b", 4))]);
        let d = plan_pool_update(&unl, &preds, &cfg()).unwrap();
        assert_eq!(d.clusters[&0].sigma, 3.0);
        assert_eq!(d.accepted.len(), 1);
        assert_eq!(d.accepted[0].0, "b");
        assert_eq!(d.accepted[0].1.len(), 4);

        let low_beta = ScoringConfig { beta: 0.1, ..cfg() };
        let d = plan_pool_update(&unl, &preds, &low_beta).unwrap();
        assert_eq!(d.added(), 2);
        assert_eq!(d.remaining(), 0);
    }

    #[test]
    fn all_zero_scores_accept_nothing() {
        let unl = BTreeMap::from([("a".to_string(), 0), ("b".to_string(), 1)]);
        let preds = BTreeMap::from([("a".to_string(), scored_pair("a", 0)), ("b".to_string(), scored_pair("b", 0))]);
        let d = plan_pool_update(&unl, &preds, &cfg()).unwrap();
        assert_eq!(d.added(), 0);
        assert_eq!(d.remaining(), 2);
    }

    #[test]
    fn missing_prediction_is_error() {
        let unl = BTreeMap::from([("a".to_string(), 0)]);
        assert!(plan_pool_update(&unl, &BTreeMap::new(), &cfg()).is_err());
    }

    #[test]
    fn termination() {
        let c = cfg();
        assert!(should_terminate(3652, 30, Some(5), &c));
        assert!(should_terminate(3652, 2000, Some(0), &c));
        assert!(!should_terminate(3652, 2000, Some(1800), &c));
        assert!(!should_terminate(3652, 3652, None, &c));
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(ScoringConfig { delta_acc: 1.0, ..cfg() }.validate().is_err());
        assert!(ScoringConfig { beta: 0.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn wire_format() {
        let p = pair(vec![det("c", [0.0, 0.0, 1.0, 1.0], 0.5)], vec![]);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"id":"s","d1":[{"class":"c","bbox":[0.0,0.0,1.0,1.0],"confidence":0.5}],"d2":[]}"#);
        assert_eq!(serde_json::from_str::<PredictionPair>(&s).unwrap(), p);
    }
}
