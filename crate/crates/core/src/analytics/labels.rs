//! Palette labeling, class IOU and k-means palette derivation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AnalyticsError;
use crate::generators::{Palette, PaletteEntry};
use crate::tile::TileImage;

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_ITERATIONS: usize = 20;
pub const DEFAULT_SEED: u64 = 17;

/// Per-pixel class labels. `labels` index into `classes`, which lists the
/// palette's distinct class names in palette order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMask {
    pub width: u32,
    pub height: u32,
    pub classes: Vec<String>,
    pub labels: Vec<u16>,
}

impl ClassMask {
    pub fn class_at(&self, x: u32, y: u32) -> &str {
        &self.classes[self.labels[(y * self.width + x) as usize] as usize]
    }

    pub fn class_index(&self, class: &str) -> Option<u16> {
        self.classes
            .iter()
            .position(|c| c == class)
            .map(|i| i as u16)
    }

    pub fn count(&self, class: &str) -> usize {
        match self.class_index(class) {
            Some(i) => self.labels.iter().filter(|&&l| l == i).count(),
            None => 0,
        }
    }

    pub fn contains(&self, class: &str) -> bool {
        self.count(class) > 0
    }
}

/// Labels every pixel with the class of its nearest palette color.
pub fn label_map(t: &TileImage, p: &Palette) -> ClassMask {
    let mut classes: Vec<String> = Vec::new();
    let entry_class: Vec<u16> = p
        .entries()
        .iter()
        .map(|e| match classes.iter().position(|c| *c == e.class) {
            Some(i) => i as u16,
            None => {
                classes.push(e.class.clone());
                (classes.len() - 1) as u16
            }
        })
        .collect();
    let labels = t.pixels().map(|px| entry_class[p.nearest(px)]).collect();
    ClassMask {
        width: t.width(),
        height: t.height(),
        classes,
        labels,
    }
}

/// Intersection over union of `class`; `None` when neither mask has it.
pub fn iou(
    pred: &ClassMask,
    truth: &ClassMask,
    class: &str,
) -> Result<Option<f64>, AnalyticsError> {
    if pred.width != truth.width || pred.height != truth.height {
        return Err(AnalyticsError::Shape(format!(
            "mask {}x{} vs {}x{}",
            pred.width, pred.height, truth.width, truth.height
        )));
    }
    let (pi, ti) = (pred.class_index(class), truth.class_index(class));
    let mut inter = 0usize;
    let mut union = 0usize;
    for (a, b) in pred.labels.iter().zip(&truth.labels) {
        let in_pred = Some(*a) == pi;
        let in_truth = Some(*b) == ti;
        inter += usize::from(in_pred && in_truth);
        union += usize::from(in_pred || in_truth);
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

/// Up to `max` pixels drawn uniformly with replacement from `tiles`; all
/// pixels in order when the pool is no larger than `max`.
pub fn sample_pixels(tiles: &[&TileImage], max: usize, seed: u64) -> Vec<[u8; 3]> {
    let all: Vec<[u8; 3]> = tiles.iter().flat_map(|t| t.pixels()).collect();
    if all.len() <= max {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..max)
        .map(|_| all[rng.random_range(0..all.len())])
        .collect()
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

fn to_f(px: [u8; 3]) -> [f64; 3] {
    px.map(f64::from)
}

/// Lloyd's k-means with farthest-point seeding. The first center is drawn
/// from `seed`; each later one is the sample farthest from all chosen
/// centers. Empty clusters keep their previous center. Centers are rounded
/// to integer RGB.
pub fn kmeans_colors(
    samples: &[[u8; 3]],
    k: usize,
    iterations: usize,
    seed: u64,
) -> Result<Vec<[u8; 3]>, AnalyticsError> {
    if k == 0 {
        return Err(AnalyticsError::Domain("k must be at least 1".into()));
    }
    if samples.len() < k {
        return Err(AnalyticsError::Domain(format!(
            "{} samples cannot seed {k} clusters",
            samples.len()
        )));
    }
    let pts: Vec<[f64; 3]> = samples.iter().copied().map(to_f).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![pts[rng.random_range(0..pts.len())]];
    let mut nearest: Vec<f64> = pts.iter().map(|p| dist2(*p, centers[0])).collect();
    while centers.len() < k {
        let (far, _) =
            nearest.iter().enumerate().fold(
                (0, -1.0),
                |best, (i, &d)| if d > best.1 { (i, d) } else { best },
            );
        let c = pts[far];
        centers.push(c);
        for (n, p) in nearest.iter_mut().zip(&pts) {
            *n = n.min(dist2(*p, c));
        }
    }

    let mut assign = vec![0usize; pts.len()];
    for _ in 0..iterations {
        for (a, p) in assign.iter_mut().zip(&pts) {
            *a = closest(&centers, *p);
        }
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assign.iter().zip(&pts) {
            counts[*a] += 1;
            for c in 0..3 {
                sums[*a][c] += p[c];
            }
        }
        let mut moved = false;
        for j in 0..k {
            if counts[j] > 0 {
                let next = sums[j].map(|s| s / counts[j] as f64);
                moved |= next != centers[j];
                centers[j] = next;
            }
        }
        if !moved {
            break;
        }
    }
    Ok(centers
        .into_iter()
        .map(|c| c.map(|v| v.round().clamp(0.0, 255.0) as u8))
        .collect())
}

fn closest(centers: &[[f64; 3]], p: [f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = dist2(p, *c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Turns cluster centers into a palette using an operator-supplied class per
/// cluster. Centers that round to the same color keep the first occurrence.
pub fn palette_from_clusters(
    centers: &[[u8; 3]],
    classes: &[String],
) -> Result<Palette, AnalyticsError> {
    if centers.len() != classes.len() {
        return Err(AnalyticsError::Domain(format!(
            "{} clusters but {} class assignments",
            centers.len(),
            classes.len()
        )));
    }
    let mut entries: Vec<PaletteEntry> = Vec::new();
    for (color, class) in centers.iter().zip(classes) {
        if !entries.iter().any(|e| e.color == *color) {
            entries.push(PaletteEntry {
                class: class.clone(),
                color: *color,
            });
        }
    }
    Ok(Palette::new(entries)?)
}
