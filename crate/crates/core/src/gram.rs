//! Generalised gram matrices of ROI features, the reciprocal-MSE gram loss
//! with its analytic gradient, and the combined training loss.
//!
//! For a convolutional feature `F` of shape `(M, N, C)` the entry `g_ij` is
//! the Frobenius product of channels `i` and `j`, divided by `M * N` unless
//! normalisation is switched off. For a fully connected feature `f` of length
//! `C`, `g_ij = f_i * f_j`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added to the MSE so identical gram matrices give a finite loss of `1e8`.
pub const GRAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Convolutional,
    FullyConnected,
}

/// ROI feature. Convolutional data is stored `(m, n, c)` row-major with the
/// channel fastest; fully connected features have `m = n = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    kind: FeatureKind,
    m: usize,
    n: usize,
    c: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn convolutional(m: usize, n: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if m == 0 || n == 0 || c == 0 {
            return Err(Error::invalid(format!("feature dims ({m}, {n}, {c}) must be positive")));
        }
        Self::checked(FeatureKind::Convolutional, m, n, c, data)
    }

    pub fn fully_connected(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("feature vector is empty"));
        }
        let c = data.len();
        Self::checked(FeatureKind::FullyConnected, 1, 1, c, data)
    }

    fn checked(kind: FeatureKind, m: usize, n: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * n * c {
            return Err(Error::DimensionMismatch(format!(
                "{} values for shape ({m}, {n}, {c})",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature value at index {i}")));
        }
        Ok(Self { kind, m, n, c, data })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    /// `(M, N, C)`; `(1, 1, C)` for fully connected features.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.m, self.n, self.c)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn positions(&self) -> usize {
        self.m * self.n
    }

    fn same_layout(&self, other: &FeatureMap) -> Result<()> {
        if self.kind != other.kind || self.shape() != other.shape() {
            return Err(Error::DimensionMismatch(format!(
                "{:?} {:?} vs {:?} {:?}",
                self.kind,
                self.shape(),
                other.kind,
                other.shape()
            )));
        }
        Ok(())
    }

    /// Replaces the values, keeping kind and shape.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::checked(self.kind, self.m, self.n, self.c, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide convolutional entries by `M * N`.
    #[default]
    Spatial,
    None,
}

/// Symmetric `C x C` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub size: usize,
    pub entries: Vec<f64>,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let c = self.size;
        (0..c)
            .map(|i| (0..c).map(|j| x[i] * self.get(i, j) * x[j]).sum::<f64>())
            .sum()
    }

    /// Entrywise `|self - other|`.
    pub fn abs_diff(&self, other: &GramMatrix) -> GramMatrix {
        GramMatrix {
            size: self.size,
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| (a - b).abs()).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.entries.iter().sum::<f64>() / self.entries.len() as f64
    }
}

fn scale(f: &FeatureMap, norm: Normalization) -> f64 {
    match (f.kind, norm) {
        (FeatureKind::Convolutional, Normalization::Spatial) => 1.0 / f.positions() as f64,
        _ => 1.0,
    }
}

pub fn gram(f: &FeatureMap) -> GramMatrix {
    gram_with(f, Normalization::Spatial)
}

pub fn gram_with(f: &FeatureMap, norm: Normalization) -> GramMatrix {
    let c = f.c;
    let s = scale(f, norm);
    let mut entries = vec![0.0; c * c];
    for row in f.data.chunks_exact(c) {
        for i in 0..c {
            let ri = row[i];
            for j in i..c {
                entries[i * c + j] += ri * row[j];
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            let v = entries[i * c + j] * s;
            entries[i * c + j] = v;
            entries[j * c + i] = v;
        }
    }
    GramMatrix { size: c, entries }
}

/// Mean squared difference over all `C^2` entries.
pub fn gram_mse(g1: &GramMatrix, g2: &GramMatrix) -> f64 {
    let n = g1.entries.len() as f64;
    g1.entries.iter().zip(&g2.entries).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramLoss {
    pub value: f64,
    pub mse: f64,
    /// Same layout as the corresponding feature's data.
    pub grad_f1: Vec<f64>,
    pub grad_f2: Vec<f64>,
}

/// `1 / (MSE(G1, G2) + eps)` and its exact gradient with respect to both
/// features.
pub fn gram_loss(f1: &FeatureMap, f2: &FeatureMap) -> Result<GramLoss> {
    gram_loss_with(f1, f2, Normalization::Spatial)
}

pub fn gram_loss_with(f1: &FeatureMap, f2: &FeatureMap, norm: Normalization) -> Result<GramLoss> {
    f1.same_layout(f2)?;
    let g1 = gram_with(f1, norm);
    let g2 = gram_with(f2, norm);
    let c = f1.c;
    let mse = gram_mse(&g1, &g2);
    let denom = mse + GRAM_EPSILON;
    let value = 1.0 / denom;

    // d value / d G1_ij = -(2 / C^2) D_ij / denom^2 with D = G1 - G2, and
    // d G_ij / d F_pk = s (delta_ik F_pj + delta_jk F_pi), so with D symmetric
    // d value / d F1_pk = -(4 s / (C^2 denom^2)) sum_j D_kj F1_pj.
    let diff: Vec<f64> = g1.entries.iter().zip(&g2.entries).map(|(a, b)| a - b).collect();
    let coef = 4.0 * scale(f1, norm) / ((c * c) as f64 * denom * denom);
    let project = |f: &FeatureMap, sign: f64| -> Vec<f64> {
        let mut out = vec![0.0; f.data.len()];
        for (row, grad) in f.data.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            for k in 0..c {
                let d_row = &diff[k * c..(k + 1) * c];
                let acc: f64 = d_row.iter().zip(row).map(|(d, x)| d * x).sum();
                grad[k] = sign * coef * acc;
            }
        }
        out
    };
    Ok(GramLoss {
        value,
        mse,
        grad_f1: project(f1, -1.0),
        grad_f2: project(f2, 1.0),
    })
}

/// Mean of per-ROI gram losses; gradients are those of the mean.
pub fn mean_gram_loss(pairs: &[(FeatureMap, FeatureMap)]) -> Result<Vec<GramLoss>> {
    if pairs.is_empty() {
        return Err(Error::invalid("no feature pairs"));
    }
    let p = pairs.len() as f64;
    pairs
        .iter()
        .map(|(a, b)| {
            let mut l = gram_loss(a, b)?;
            l.value /= p;
            l.grad_f1.iter_mut().chain(l.grad_f2.iter_mut()).for_each(|g| *g /= p);
            Ok(l)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_d1: f64,
    pub loss_d2: f64,
    pub gram_loss: f64,
    pub alpha: f64,
    pub total: f64,
}

/// `loss_d1 + loss_d2 + alpha * gram`.
pub fn total_loss(loss_d1: f64, loss_d2: f64, gram_value: f64, alpha: f64) -> Result<LossReport> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be non-negative, got {alpha}")));
    }
    Ok(LossReport {
        loss_d1,
        loss_d2,
        gram_loss: gram_value,
        alpha,
        total: loss_d1 + loss_d2 + gram_value * alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPolicy {
    /// Calibrated on the first report so that `alpha * gram` equals
    /// `fraction * (loss_d1 + loss_d2)`, then frozen.
    Auto { fraction: f64 },
    Fixed(f64),
}

impl Default for AlphaPolicy {
    fn default() -> Self {
        AlphaPolicy::Auto { fraction: 0.1 }
    }
}

/// Applies an [`AlphaPolicy`] across successive loss reports.
#[derive(Debug, Clone)]
pub struct LossCombiner {
    policy: AlphaPolicy,
    alpha: Option<f64>,
}

impl LossCombiner {
    pub fn new(policy: AlphaPolicy) -> Self {
        let alpha = match policy {
            AlphaPolicy::Fixed(a) => Some(a),
            AlphaPolicy::Auto { .. } => None,
        };
        Self { policy, alpha }
    }

    /// Starts from an alpha that was already calibrated (on resume).
    pub fn with_alpha(policy: AlphaPolicy, alpha: Option<f64>) -> Self {
        Self {
            policy,
            alpha: alpha.or(Self::new(policy).alpha),
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn combine(&mut self, loss_d1: f64, loss_d2: f64, gram_value: f64) -> Result<LossReport> {
        let alpha = match (self.alpha, self.policy) {
            (Some(a), _) => a,
            (None, AlphaPolicy::Auto { fraction }) => {
                let a = if gram_value > 0.0 {
                    fraction * (loss_d1 + loss_d2) / gram_value
                } else {
                    0.0
                };
                self.alpha = Some(a);
                a
            }
            (None, AlphaPolicy::Fixed(a)) => a,
        };
        total_loss(loss_d1, loss_d2, gram_value, alpha)
    }
}

/// Writes `|G1 - G2|` as CSV, and optionally as an 8-bit binary PGM scaled
/// so the largest entry maps to 255.
pub fn gram_diff_export(f1: &FeatureMap, f2: &FeatureMap, csv_path: &Path, pgm_path: Option<&Path>) -> Result<GramMatrix> {
    f1.same_layout(f2)?;
    let diff = gram(f1).abs_diff(&gram(f2));
    let c = diff.size;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(csv_path)?;
    for row in diff.entries.chunks_exact(c) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    if let Some(p) = pgm_path {
        fs::write(p, pgm_bytes(&diff))?;
    }
    Ok(diff)
}

pub fn pgm_pixels(m: &GramMatrix) -> Vec<u8> {
    let max = m.entries.iter().cloned().fold(0.0f64, f64::max);
    m.entries
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
        .collect()
}

pub fn pgm_bytes(m: &GramMatrix) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.size, m.size).into_bytes();
    out.extend(pgm_pixels(m));
    out
}

/// Feature tensor CSV: first row is the shape (`M,N,C` or `C`), then the
/// flattened values in storage order on any number of rows.
pub fn read_feature_csv(path: &Path) -> Result<FeatureMap> {
    let text = fs::read_to_string(path)?;
    parse_feature_csv(&text).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message,
    })
}

pub fn parse_feature_csv(text: &str) -> std::result::Result<FeatureMap, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty feature file")?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("bad shape header {header:?}: {e}"))?;
    let values: Vec<f64> = lines
        .flat_map(|l| l.split(','))
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("bad value: {e}"))?;
    let f = match dims.as_slice() {
        [c] => FeatureMap::fully_connected(values).and_then(|f| {
            if f.c != *c {
                Err(Error::DimensionMismatch(format!("header says C={c}, got {} values", f.c)))
            } else {
                Ok(f)
            }
        }),
        [m, n, c] => FeatureMap::convolutional(*m, *n, *c, values),
        _ => return Err(format!("shape header must have 1 or 3 fields, got {header:?}")),
    };
    f.map_err(|e| e.to_string())
}

pub fn write_feature_csv(path: &Path, f: &FeatureMap) -> Result<()> {
    let mut out = fs::File::create(path)?;
    match f.kind {
        FeatureKind::Convolutional => writeln!(out, "{},{},{}", f.m, f.n, f.c)?,
        FeatureKind::FullyConnected => writeln!(out, "{}", f.c)?,
    }
    let row: Vec<String> = f.data.iter().map(|v| v.to_string()).collect();
    writeln!(out, "{}", row.join(","))?;
    Ok(())
}
