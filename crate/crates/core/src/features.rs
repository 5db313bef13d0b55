//! Per-image descriptors for key-sample selection: a 128-bin HSV colour
//! histogram (8 hue x 4 saturation x 4 value) and the Shannon entropy of the
//! 8-bit grayscale histogram.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HSV_BINS: usize = 128;

/// Hue bin upper edges in degrees; intervals are `[lo, hi)`.
pub const HUE_EDGES: [f64; 8] = [25.0, 45.0, 75.0, 155.0, 200.0, 270.0, 295.0, 360.0];

/// L1-normalised histogram, bin index `h * 16 + s * 4 + v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsvHistogram(pub Vec<f64>);

impl HsvHistogram {
    pub fn bins(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct EntropyScore(pub f64);

pub fn hue_bin(hue: f64) -> usize {
    HUE_EDGES.iter().position(|&e| hue < e).unwrap_or(7)
}

/// Quarters of `[0, 1]`; 1.0 falls in the last bin.
pub fn quarter_bin(x: f64) -> usize {
    ((x * 4.0).floor() as usize).min(3)
}

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
/// Achromatic pixels get hue 0.
pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h % 360.0, s, max)
}

pub fn hsv_bin(r: u8, g: u8, b: u8) -> usize {
    let (h, s, v) = rgb_to_hsv(r, g, b);
    hue_bin(h) * 16 + quarter_bin(s) * 4 + quarter_bin(v)
}

fn ensure_pixels(image: &RgbImage) -> Result<usize> {
    let n = image.width() as usize * image.height() as usize;
    if n == 0 {
        return Err(Error::invalid("image has no pixels"));
    }
    Ok(n)
}

pub fn hsv_histogram(image: &RgbImage) -> Result<HsvHistogram> {
    let n = ensure_pixels(image)?;
    let mut counts = [0u64; HSV_BINS];
    for p in image.pixels() {
        counts[hsv_bin(p[0], p[1], p[2])] += 1;
    }
    Ok(HsvHistogram(counts.iter().map(|&c| c as f64 / n as f64).collect()))
}

/// Rounded luma `0.299 R + 0.587 G + 0.114 B`.
pub fn gray_level(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round().min(255.0) as u8
}

/// Entropy in bits of a 256-level histogram given as counts.
pub fn entropy_of_counts(counts: &[u64; 256]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let e: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    // -0.0 for a single level
    e.max(0.0)
}

pub fn entropy(image: &RgbImage) -> Result<EntropyScore> {
    ensure_pixels(image)?;
    let mut counts = [0u64; 256];
    for p in image.pixels() {
        counts[gray_level(p[0], p[1], p[2]) as usize] += 1;
    }
    Ok(EntropyScore(entropy_of_counts(&counts)))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub histogram: HsvHistogram,
    pub entropy: EntropyScore,
}

pub fn describe(image: &RgbImage) -> Result<Descriptor> {
    Ok(Descriptor {
        histogram: hsv_histogram(image)?,
        entropy: entropy(image)?,
    })
}

/// Writes `id,bin_0..bin_127,entropy` rows.
pub fn write_descriptor_cache(path: &Path, descriptors: &BTreeMap<String, Descriptor>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..HSV_BINS).map(|i| format!("bin_{i}")));
    header.push("entropy".into());
    w.write_record(&header)?;
    for (id, d) in descriptors {
        let mut row = vec![id.clone()];
        row.extend(d.histogram.0.iter().map(|v| v.to_string()));
        row.push(d.entropy.0.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_descriptor_cache(path: &Path) -> Result<BTreeMap<String, Descriptor>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: m.to_string(),
        };
        if rec.len() != HSV_BINS + 2 {
            return Err(bad("wrong column count"));
        }
        let nums: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("non-numeric value"))?;
        out.insert(
            rec[0].to_string(),
            Descriptor {
                histogram: HsvHistogram(nums[..HSV_BINS].to_vec()),
                entropy: EntropyScore(nums[HSV_BINS]),
            },
        );
    }
    Ok(out)
}
