//! Per-channel pixel distributions and 1-D earth mover's distance.

use serde::{Deserialize, Serialize};

use super::AnalyticsError;
use crate::tile::TileImage;

pub const BINS: usize = 256;
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Three 256-bin channel distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelHistogram {
    pub channels: [Vec<f64>; 3],
    pub normalized: bool,
}

/// Raw counts pooled over any number of tiles.
#[derive(Debug, Clone)]
pub struct HistogramAccumulator {
    counts: [[u64; BINS]; 3],
    pixels: u64,
}

impl Default for HistogramAccumulator {
    fn default() -> Self {
        HistogramAccumulator {
            counts: [[0; BINS]; 3],
            pixels: 0,
        }
    }
}

impl HistogramAccumulator {
    pub fn add(&mut self, t: &TileImage) {
        for px in t.pixels() {
            for (counts, v) in self.counts.iter_mut().zip(px) {
                counts[v as usize] += 1;
            }
            self.pixels += 1;
        }
    }

    pub fn merge(&mut self, other: &HistogramAccumulator) {
        for c in 0..3 {
            for b in 0..BINS {
                self.counts[c][b] += other.counts[c][b];
            }
        }
        self.pixels += other.pixels;
    }

    pub fn pixels(&self) -> u64 {
        self.pixels
    }

    pub fn finish(&self) -> Result<PixelHistogram, AnalyticsError> {
        if self.pixels == 0 {
            return Err(AnalyticsError::Domain("histogram of no pixels".into()));
        }
        let n = self.pixels as f64;
        let channels =
            std::array::from_fn(|c| self.counts[c].iter().map(|&k| k as f64 / n).collect());
        Ok(PixelHistogram {
            channels,
            normalized: true,
        })
    }
}

/// Pooled normalized histogram of `tiles`.
pub fn pixel_histogram<'a>(
    tiles: impl IntoIterator<Item = &'a TileImage>,
) -> Result<PixelHistogram, AnalyticsError> {
    let mut acc = HistogramAccumulator::default();
    for t in tiles {
        acc.add(t);
    }
    acc.finish()
}

fn check_distribution(h: &[f64]) -> Result<(), AnalyticsError> {
    if h.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(AnalyticsError::Domain(
            "histogram has a negative or non-finite bin".into(),
        ));
    }
    let mass: f64 = h.iter().sum();
    if (mass - 1.0).abs() > MASS_TOLERANCE {
        return Err(AnalyticsError::Domain(format!(
            "histogram mass is {mass}, not 1"
        )));
    }
    Ok(())
}

/// Wasserstein-1 distance between two normalized channels, with ground
/// distance `|i - j| / 255`.
pub fn emd(h1: &[f64], h2: &[f64]) -> Result<f64, AnalyticsError> {
    if h1.len() != h2.len() || h1.is_empty() {
        return Err(AnalyticsError::Shape(format!(
            "{} bins vs {} bins",
            h1.len(),
            h2.len()
        )));
    }
    check_distribution(h1)?;
    check_distribution(h2)?;
    let mut cdf = 0.0;
    let mut total = 0.0;
    for (a, b) in h1.iter().zip(h2) {
        cdf += a - b;
        total += cdf.abs();
    }
    Ok(total / (BINS - 1) as f64)
}

impl PixelHistogram {
    pub fn mass(&self, channel: usize) -> f64 {
        self.channels[channel].iter().sum()
    }

    /// Mean channel EMD.
    pub fn emd(&self, other: &PixelHistogram) -> Result<f64, AnalyticsError> {
        if !self.normalized || !other.normalized {
            return Err(AnalyticsError::Domain("histogram is not normalized".into()));
        }
        let mut sum = 0.0;
        for c in 0..3 {
            sum += emd(&self.channels[c], &other.channels[c])?;
        }
        Ok(sum / 3.0)
    }
}
