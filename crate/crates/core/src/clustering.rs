//! Ward agglomerative clustering and Calinski-Harabasz model selection.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One merge of the dendrogram. Leaves are `0..n`, the cluster created by
/// step `s` is `n + s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ward linkage on Euclidean distance.
///
/// Merge distances follow the usual Lance-Williams convention (the distance
/// between two singletons is their Euclidean distance). Among equally close
/// pairs the one with the lowest `(i, j)` is merged first, where a cluster is
/// identified by its smallest leaf index.
pub fn agglomerate<V: AsRef<[f64]>>(points: &[V]) -> Result<Dendrogram> {
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 points to cluster, got {n}")));
    }
    let dim = points[0].as_ref().len();
    if let Some(bad) = points.iter().position(|p| p.as_ref().len() != dim) {
        return Err(Error::DimensionMismatch(format!(
            "point {bad} has length {}, expected {dim}",
            points[bad].as_ref().len()
        )));
    }

    // Squared Ward distances, row-major, only i < j used.
    let mut d = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            d[i * n + j] = sq_dist(points[i].as_ref(), points[j].as_ref());
        }
    }
    let at = |d: &[f64], i: usize, j: usize| if i < j { d[i * n + j] } else { d[j * n + i] };

    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut node = (0..n).collect::<Vec<_>>();
    // nearest[i] = best j > i (lowest index on ties)
    let mut nearest = vec![usize::MAX; n];
    let find_nearest = |d: &[f64], active: &[bool], i: usize| {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in i + 1..n {
            if active[j] {
                let v = d[i * n + j];
                if v < best_d {
                    best_d = v;
                    best = j;
                }
            }
        }
        best
    };
    for i in 0..n - 1 {
        nearest[i] = find_nearest(&d, &active, i);
    }

    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut bi = usize::MAX;
        let mut best = f64::INFINITY;
        for i in 0..n {
            if active[i] && nearest[i] != usize::MAX {
                let v = d[i * n + nearest[i]];
                if v < best {
                    best = v;
                    bi = i;
                }
            }
        }
        let (i, j) = (bi, nearest[bi]);
        let (si, sj) = (size[i] as f64, size[j] as f64);
        let dij = at(&d, i, j);
        merges.push(Merge {
            a: node[i].min(node[j]),
            b: node[i].max(node[j]),
            distance: dij.max(0.0).sqrt(),
            size: size[i] + size[j],
        });

        active[j] = false;
        for k in 0..n {
            if !active[k] || k == i {
                continue;
            }
            let sk = size[k] as f64;
            let v = ((si + sk) * at(&d, k, i) + (sj + sk) * at(&d, k, j) - sk * dij) / (si + sj + sk);
            if k < i {
                d[k * n + i] = v;
            } else {
                d[i * n + k] = v;
            }
        }
        size[i] += size[j];
        node[i] = n + step;

        for k in 0..n {
            if !active[k] {
                continue;
            }
            if k == i || nearest[k] == i || nearest[k] == j {
                nearest[k] = find_nearest(&d, &active, k);
            } else if k < i && nearest[k] != usize::MAX {
                let cur = d[k * n + nearest[k]];
                let cand = d[k * n + i];
                if cand < cur || (cand == cur && i < nearest[k]) {
                    nearest[k] = i;
                }
            }
        }
    }
    Ok(Dendrogram { leaves: n, merges })
}

impl Dendrogram {
    /// Flat partition into `k` clusters; labels are `0..k` ordered by each
    /// cluster's smallest leaf index.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        let n = self.leaves;
        if k == 0 || k > n {
            return Err(Error::invalid(format!("cannot cut {n} leaves into {k} clusters")));
        }
        let mut parent: Vec<usize> = (0..2 * n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (s, m) in self.merges.iter().take(n - k).enumerate() {
            let id = n + s;
            let ra = find(&mut parent, m.a);
            let rb = find(&mut parent, m.b);
            parent[ra] = id;
            parent[rb] = id;
        }
        let mut label_of_root = BTreeMap::new();
        let mut out = Vec::with_capacity(n);
        for leaf in 0..n {
            let r = find(&mut parent, leaf);
            let next = label_of_root.len();
            out.push(*label_of_root.entry(r).or_insert(next));
        }
        Ok(out)
    }
}

/// Calinski-Harabasz index `[tr(B)/(K-1)] / [tr(W)/(N-K)]`.
///
/// Returns `f64::INFINITY` when the within-cluster dispersion vanishes
/// (for example `K == N`, or all points identical).
pub fn calinski_harabasz<V: AsRef<[f64]>>(points: &[V], labels: &[usize]) -> Result<f64> {
    let n = points.len();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} points but {} labels", labels.len())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::invalid("Calinski-Harabasz needs at least 2 clusters"));
    }
    let dim = points[0].as_ref().len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; dim]; k];
    let mut total = vec![0.0; dim];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (t, (s, x)) in total.iter_mut().zip(sums[l].iter_mut().zip(p.as_ref())) {
            *s += x;
            *t += x;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("cluster {empty} is empty")));
    }
    let mean: Vec<f64> = total.iter().map(|t| t / n as f64).collect();
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
        .collect();
    let between: f64 = centroids
        .iter()
        .zip(&counts)
        .map(|(c, &m)| m as f64 * sq_dist(c, &mean))
        .sum();
    let within: f64 = points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p.as_ref(), &centroids[l]))
        .sum();
    if within <= 0.0 || n == k {
        return Ok(f64::INFINITY);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// Cluster per input point, in input order.
    pub labels: Vec<usize>,
    pub ch_scores: BTreeMap<usize, f64>,
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KRange {
    pub k_min: usize,
    pub k_max: usize,
}

impl KRange {
    /// `[2, min(30, n - 1)]`
    pub fn default_for(n: usize) -> Self {
        Self {
            k_min: 2,
            k_max: 30.min(n.saturating_sub(1)).max(2),
        }
    }
}

/// Cuts the dendrogram at every K in range and keeps the CH argmax, ties
/// going to the smaller K.
pub fn select_k<V: AsRef<[f64]> + Sync>(dendrogram: &Dendrogram, points: &[V], range: KRange) -> Result<ClusterModel> {
    let n = dendrogram.leaves;
    if points.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "dendrogram has {n} leaves but {} points given",
            points.len()
        )));
    }
    if range.k_min < 2 || range.k_min > range.k_max || range.k_max + 1 > n {
        return Err(Error::invalid(format!(
            "invalid K range [{}, {}] for {n} samples",
            range.k_min, range.k_max
        )));
    }
    let scored: Vec<(usize, Vec<usize>, f64)> = (range.k_min..=range.k_max)
        .into_par_iter()
        .map(|k| {
            let labels = dendrogram.cut(k)?;
            let ch = calinski_harabasz(points, &labels)?;
            Ok((k, labels, ch))
        })
        .collect::<Result<_>>()?;

    let mut ch_scores = BTreeMap::new();
    let mut best: Option<usize> = None;
    for (idx, (k, _, ch)) in scored.iter().enumerate() {
        ch_scores.insert(*k, *ch);
        if best.is_none_or(|b| *ch > scored[b].2) {
            best = Some(idx);
        }
    }
    let (k, labels, _) = scored.into_iter().nth(best.expect("non-empty range")).unwrap();
    Ok(model_from_labels(k, labels, ch_scores))
}

/// Model for a fixed K, still recording its CH score.
pub fn force_k<V: AsRef<[f64]>>(dendrogram: &Dendrogram, points: &[V], k: usize) -> Result<ClusterModel> {
    if k < 2 || k >= dendrogram.leaves {
        return Err(Error::invalid(format!("forced K={k} outside [2, {}]", dendrogram.leaves - 1)));
    }
    let labels = dendrogram.cut(k)?;
    let ch = calinski_harabasz(points, &labels)?;
    Ok(model_from_labels(k, labels, BTreeMap::from([(k, ch)])))
}

fn model_from_labels(k: usize, labels: Vec<usize>, ch_scores: BTreeMap<usize, f64>) -> ClusterModel {
    let mut sizes = vec![0; k];
    for &l in &labels {
        sizes[l] += 1;
    }
    ClusterModel {
        k,
        labels,
        ch_scores,
        sizes,
    }
}

/// Relabels clusters so that ids follow the order of each cluster's
/// smallest key (typically the sample id).
pub fn canonical_labels<K: Ord>(keys: &[K], labels: &[usize]) -> Vec<usize> {
    let mut smallest: BTreeMap<usize, &K> = BTreeMap::new();
    for (key, &l) in keys.iter().zip(labels) {
        smallest
            .entry(l)
            .and_modify(|s| {
                if key < *s {
                    *s = key
                }
            })
            .or_insert(key);
    }
    let mut order: Vec<(&K, usize)> = smallest.into_iter().map(|(l, k)| (k, l)).collect();
    order.sort();
    let remap: BTreeMap<usize, usize> = order.iter().enumerate().map(|(new, &(_, old))| (old, new)).collect();
    labels.iter().map(|l| remap[l]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_pair() {
        let d = agglomerate(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(d.merges.len(), 1);
        assert_eq!(d.merges[0].distance, 0.0);
    }

    #[test]
    fn line_points_merge_closest_first() {
        let d = agglomerate(&[[0.0], [1.0], [10.0]]).unwrap();
        assert_eq!((d.merges[0].a, d.merges[0].b), (0, 1));
        assert_eq!(d.merges[0].distance, 1.0);
        // Ward: sqrt((2*100 + 2*81 - 1)/3)
        assert!((d.merges[1].distance - (361.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn n_minus_one_merges_monotone() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![(i * i) as f64, (i % 2) as f64]).collect();
        let d = agglomerate(&pts).unwrap();
        assert_eq!(d.merges.len(), 4);
        assert!(d.merges.windows(2).all(|w| w[0].distance <= w[1].distance));
        assert_eq!(d.merges.last().unwrap().size, 5);
    }

    #[test]
    fn ties_take_lowest_pair() {
        // 0-1 and 2-3 are both at distance 1
        let d = agglomerate(&[[0.0], [1.0], [5.0], [6.0]]).unwrap();
        assert_eq!((d.merges[0].a, d.merges[0].b), (0, 1));
        assert_eq!((d.merges[1].a, d.merges[1].b), (2, 3));
    }

    #[test]
    fn errors() {
        assert!(agglomerate(&[[1.0]]).is_err());
        assert!(matches!(
            agglomerate(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn ch_degenerate_and_precondition() {
        let same = vec![[1.0, 1.0]; 4];
        assert_eq!(calinski_harabasz(&same, &[0, 0, 1, 1]).unwrap(), f64::INFINITY);
        assert!(calinski_harabasz(&same, &[0, 0, 0, 0]).is_err());
        assert!(calinski_harabasz(&same, &[0, 0, 2, 2]).is_err());
        let pts = [[0.0], [1.0], [5.0]];
        assert_eq!(calinski_harabasz(&pts, &[0, 1, 2]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ch_prefers_true_split() {
        let pts = [[0.0], [0.1], [0.2], [10.0], [10.1], [10.2]];
        let good = calinski_harabasz(&pts, &[0, 0, 0, 1, 1, 1]).unwrap();
        // move one point across, every possible way
        for moved in 0..6 {
            let mut labels = vec![0, 0, 0, 1, 1, 1];
            labels[moved] = 1 - labels[moved];
            let bad = calinski_harabasz(&pts, &labels).unwrap();
            assert!(good > 100.0 * bad, "moved {moved}: {good} vs {bad}");
        }
    }

    #[test]
    fn cut_refines() {
        let pts: Vec<[f64; 1]> = [0.0, 0.3, 2.0, 2.1, 7.0, 7.7, 20.0].iter().map(|&x| [x]).collect();
        let d = agglomerate(&pts).unwrap();
        for k in 1..pts.len() {
            let coarse = d.cut(k).unwrap();
            let fine = d.cut(k + 1).unwrap();
            for a in 0..pts.len() {
                for b in 0..pts.len() {
                    if fine[a] == fine[b] {
                        assert_eq!(coarse[a], coarse[b]);
                    }
                }
            }
        }
    }

    #[test]
    fn select_k_range_errors() {
        let pts = [[0.0], [1.0], [2.0], [3.0]];
        let d = agglomerate(&pts).unwrap();
        assert!(select_k(&d, &pts, KRange { k_min: 1, k_max: 2 }).is_err());
        assert!(select_k(&d, &pts, KRange { k_min: 3, k_max: 2 }).is_err());
        assert!(select_k(&d, &pts, KRange { k_min: 2, k_max: 4 }).is_err());
        assert!(select_k(&d, &pts, KRange { k_min: 2, k_max: 3 }).is_ok());
    }

    #[test]
    fn force_k_records_score() {
        let pts = [[0.0], [1.0], [5.0], [6.0], [20.0]];
        let d = agglomerate(&pts).unwrap();
        let m = force_k(&d, &pts, 3).unwrap();
        assert_eq!(m.k, 3);
        assert_eq!(m.sizes.iter().sum::<usize>(), 5);
        assert!(m.ch_scores.contains_key(&3));
    }

    #[test]
    fn canonical_by_smallest_key() {
        let keys = ["d", "a", "c", "b"];
        assert_eq!(canonical_labels(&keys, &[0, 1, 0, 1]), vec![1, 0, 1, 0]);
    }
}
