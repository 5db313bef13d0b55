//! Key-sample selection: the highest-entropy images of every cluster.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::EntropyScore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub ratio: f64,
    #[serde(default)]
    pub per_cluster_cap: Option<usize>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            ratio: 0.05,
            per_cluster_cap: None,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::invalid(format!("key ratio {} outside (0, 1]", self.ratio)));
        }
        Ok(())
    }

    /// `min(ceil(ratio * n), n)`, optionally capped.
    pub fn quota(&self, n: usize) -> usize {
        // ratio * n can land a hair above an integer (0.07 * 100 = 7.000000000000001)
        let raw = (self.ratio * n as f64 - 1e-9).ceil().max(0.0) as usize;
        let m = raw.min(n);
        self.per_cluster_cap.map_or(m, |cap| m.min(cap))
    }
}

/// Selected sample ids per cluster, each list in descending entropy order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySet {
    pub ratio: f64,
    pub clusters: BTreeMap<usize, Vec<String>>,
}

impl KeySet {
    pub fn total(&self) -> usize {
        self.clusters.values().map(Vec::len).sum()
    }

    pub fn counts(&self) -> BTreeMap<usize, usize> {
        self.clusters.iter().map(|(&k, v)| (k, v.len())).collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.clusters.values().flatten().map(String::as_str)
    }
}

/// Picks `min(ceil(ratio * N_k), N_k)` samples from each cluster, highest
/// entropy first, ties broken by ascending sample id.
pub fn select_keys(
    assignments: &BTreeMap<String, usize>,
    entropies: &BTreeMap<String, EntropyScore>,
    cfg: &SelectionConfig,
) -> Result<KeySet> {
    cfg.validate()?;
    if assignments.is_empty() {
        return Err(Error::invalid("empty cluster model"));
    }
    let mut members: BTreeMap<usize, Vec<(&str, f64)>> = BTreeMap::new();
    for (id, &cluster) in assignments {
        let e = entropies
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no entropy for sample {id:?}")))?;
        members.entry(cluster).or_default().push((id.as_str(), e.0));
    }
    let clusters = members
        .into_iter()
        .map(|(cluster, mut m)| {
            m.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            let take = cfg.quota(m.len());
            (cluster, m.into_iter().take(take).map(|(id, _)| id.to_string()).collect())
        })
        .collect();
    Ok(KeySet {
        ratio: cfg.ratio,
        clusters,
    })
}
