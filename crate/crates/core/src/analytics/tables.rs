//! Per-zoom metric rows, strategy comparison tables and improvement
//! aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::histogram::{HistogramAccumulator, PixelHistogram};
use super::labels::{iou, label_map};
use super::ssim::{essi_gray, ssim, GrayImage};
use super::AnalyticsError;
use crate::corpus::{Manifest, Split, TileKind, TileReader};
use crate::generators::{Palette, ROAD, WATER};
use crate::strategies::{Level, StrategyKind};
use crate::tile::TileCoord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ssim,
    Essi,
    IouRoad,
    IouWater,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Ssim,
        Metric::Essi,
        Metric::IouRoad,
        Metric::IouWater,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Ssim => "ssim",
            Metric::Essi => "essi",
            Metric::IouRoad => "iou_road",
            Metric::IouWater => "iou_water",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

/// Metric values of one strategy at one zoom. `None` means not computed or
/// undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub zoom: u8,
    pub strategy: StrategyKind,
    pub ssim: Option<f64>,
    pub essi: Option<f64>,
    pub iou_road: Option<f64>,
    pub iou_water: Option<f64>,
}

impl MetricRow {
    pub fn empty(zoom: u8, strategy: StrategyKind) -> Self {
        MetricRow {
            zoom,
            strategy,
            ssim: None,
            essi: None,
            iou_road: None,
            iou_water: None,
        }
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Ssim => self.ssim,
            Metric::Essi => self.essi,
            Metric::IouRoad => self.iou_road,
            Metric::IouWater => self.iou_water,
        }
    }

    pub fn set(&mut self, metric: Metric, value: Option<f64>) {
        match metric {
            Metric::Ssim => self.ssim = value,
            Metric::Essi => self.essi = value,
            Metric::IouRoad => self.iou_road = value,
            Metric::IouWater => self.iou_water = value,
        }
    }
}

/// Which metrics to compute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricSelection(pub Vec<Metric>);

impl MetricSelection {
    pub fn all() -> Self {
        MetricSelection(Metric::ALL.to_vec())
    }

    pub fn none() -> Self {
        MetricSelection(Vec::new())
    }

    pub fn contains(&self, m: Metric) -> bool {
        self.0.contains(&m)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for MetricSelection {
    fn default() -> Self {
        MetricSelection::all()
    }
}

/// Average relative change of series over parallel for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub metric: Metric,
    /// Percent rounded to two decimals; `None` when no zoom qualified.
    pub percent: Option<f64>,
    /// Zooms that entered the mean.
    pub zooms: Vec<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn index_rows<'a>(
    rows: &'a [MetricRow],
    which: &str,
) -> Result<BTreeMap<u8, &'a MetricRow>, AnalyticsError> {
    let mut out = BTreeMap::new();
    for r in rows {
        if out.insert(r.zoom, r).is_some() {
            return Err(AnalyticsError::Domain(format!(
                "{which} rows list zoom {} twice",
                r.zoom
            )));
        }
    }
    Ok(out)
}

/// Mean of `series / parallel - 1` in percent over every zoom except the
/// shared top one. Zooms with an undefined value or a zero parallel value
/// are dropped with a warning.
pub fn aggregate_improvement(
    series: &[MetricRow],
    parallel: &[MetricRow],
    metric: Metric,
) -> Result<Improvement, AnalyticsError> {
    let s = index_rows(series, "series")?;
    let p = index_rows(parallel, "parallel")?;
    if !s.keys().eq(p.keys()) {
        return Err(AnalyticsError::Domain(format!(
            "series zooms {:?} differ from parallel zooms {:?}",
            s.keys().collect::<Vec<_>>(),
            p.keys().collect::<Vec<_>>()
        )));
    }
    let top = s.keys().next_back().copied();
    let mut warnings = Vec::new();
    let mut zooms = Vec::new();
    let mut total = 0.0;
    for (&z, sr) in s.iter().rev() {
        if Some(z) == top {
            continue;
        }
        match (sr.get(metric), p[&z].get(metric)) {
            (Some(_), Some(0.0)) => {
                warnings.push(format!("{metric} at zoom {z}: parallel value is zero"));
            }
            (Some(sv), Some(pv)) => {
                total += sv / pv - 1.0;
                zooms.push(z);
            }
            _ => warnings.push(format!("{metric} at zoom {z}: value undefined")),
        }
    }
    for w in &warnings {
        warn!("{w}; zoom excluded");
    }
    let percent = (!zooms.is_empty()).then(|| round2(100.0 * total / zooms.len() as f64));
    Ok(Improvement {
        metric,
        percent,
        zooms,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmdRow {
    pub zoom: u8,
    pub parallel: f64,
    pub series: f64,
}

/// EMD cost each strategy faces per zoom, top zoom first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmdTable {
    pub rows: Vec<EmdRow>,
}

impl EmdTable {
    pub fn row(&self, zoom: u8) -> Option<&EmdRow> {
        self.rows.iter().find(|r| r.zoom == zoom)
    }
}

/// The parallel entry at zoom z is EMD(rsi@z, map@z). The series entry is
/// the same at the top zoom and EMD(map@z+1, map@z) below it.
pub fn emd_strategy_table(
    rsi: &BTreeMap<u8, PixelHistogram>,
    maps: &BTreeMap<u8, PixelHistogram>,
    top: u8,
    bottom: u8,
) -> Result<EmdTable, AnalyticsError> {
    if bottom > top {
        return Err(AnalyticsError::Domain(format!(
            "bottom zoom {bottom} above top zoom {top}"
        )));
    }
    let mut missing = Vec::new();
    for z in (bottom..=top).rev() {
        if !rsi.contains_key(&z) {
            missing.push(format!("rsi@{z}"));
        }
        if !maps.contains_key(&z) {
            missing.push(format!("map@{z}"));
        }
    }
    if !missing.is_empty() {
        return Err(AnalyticsError::Coverage(missing));
    }
    let mut rows = Vec::new();
    for z in (bottom..=top).rev() {
        let parallel = rsi[&z].emd(&maps[&z])?;
        let series = if z == top {
            parallel
        } else {
            maps[&(z + 1)].emd(&maps[&z])?
        };
        rows.push(EmdRow {
            zoom: z,
            parallel,
            series,
        });
    }
    Ok(EmdTable { rows })
}

/// Pooled histogram of every `kind` tile per zoom. Zooms without tiles are
/// left out.
pub fn corpus_histograms(
    m: &Manifest,
    reader: &dyn TileReader,
    kind: TileKind,
    split: Option<Split>,
    zooms: impl IntoIterator<Item = u8>,
) -> Result<BTreeMap<u8, PixelHistogram>, AnalyticsError> {
    let mut out = BTreeMap::new();
    for z in zooms {
        let entries: Vec<_> = m.select(kind, z, split).collect();
        if entries.is_empty() {
            continue;
        }
        let acc = entries
            .par_iter()
            .map(|e| {
                let mut acc = HistogramAccumulator::default();
                acc.add(&reader.read(e)?);
                Ok(acc)
            })
            .collect::<Result<Vec<_>, AnalyticsError>>()?
            .into_iter()
            .fold(HistogramAccumulator::default(), |mut a, b| {
                a.merge(&b);
                a
            });
        out.insert(z, acc.finish()?);
    }
    Ok(out)
}

/// Outcome of scoring one generated level against real maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelEvaluation {
    pub row: MetricRow,
    pub tiles: usize,
    /// Generated tiles with no real counterpart.
    pub unmatched: Vec<TileCoord>,
}

#[derive(Debug, Default)]
struct TileScores {
    ssim: Option<f64>,
    essi: Option<f64>,
    iou_road: Option<f64>,
    iou_water: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores every generated tile that has a real counterpart and averages
/// per tile, unweighted. Undefined IOUs are left out of the mean.
pub fn evaluate_level(
    zoom: u8,
    strategy: StrategyKind,
    generated: &Level,
    real: &Level,
    palette: &Palette,
    selection: &MetricSelection,
) -> Result<LevelEvaluation, AnalyticsError> {
    let (matched, unmatched): (Vec<_>, Vec<_>) =
        generated.iter().partition(|(c, _)| real.contains_key(c));
    let unmatched: Vec<TileCoord> = unmatched.into_iter().map(|(c, _)| *c).collect();
    let mut row = MetricRow::empty(zoom, strategy);
    if selection.is_empty() {
        return Ok(LevelEvaluation {
            row,
            tiles: matched.len(),
            unmatched,
        });
    }
    if matched.is_empty() {
        return Err(AnalyticsError::Coverage(vec![format!(
            "no real map tiles match the {} generated tiles at zoom {zoom}",
            generated.len()
        )]));
    }
    let want_iou = selection.contains(Metric::IouRoad) || selection.contains(Metric::IouWater);
    let scores: Vec<TileScores> = matched
        .par_iter()
        .map(|(c, g)| {
            let r = &real[c];
            let mut s = TileScores::default();
            if selection.contains(Metric::Ssim) || selection.contains(Metric::Essi) {
                let (lg, lr) = (GrayImage::luma(g), GrayImage::luma(r));
                if selection.contains(Metric::Ssim) {
                    s.ssim = Some(ssim(&lg, &lr)?);
                }
                if selection.contains(Metric::Essi) {
                    s.essi = Some(essi_gray(&lg, &lr)?);
                }
            }
            if want_iou {
                let (mg, mr) = (label_map(g, palette), label_map(r, palette));
                if selection.contains(Metric::IouRoad) {
                    s.iou_road = iou(&mg, &mr, ROAD)?;
                }
                if selection.contains(Metric::IouWater) {
                    s.iou_water = iou(&mg, &mr, WATER)?;
                }
            }
            Ok(s)
        })
        .collect::<Result<_, AnalyticsError>>()?;
    row.ssim = mean(scores.iter().map(|s| s.ssim));
    row.essi = mean(scores.iter().map(|s| s.essi));
    row.iou_road = mean(scores.iter().map(|s| s.iou_road));
    row.iou_water = mean(scores.iter().map(|s| s.iou_water));
    Ok(LevelEvaluation {
        row,
        tiles: matched.len(),
        unmatched,
    })
}
