//! Evaluation reports: building them from runs, CSV and JSON forms, and
//! SVG trend charts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{
    aggregate_improvement, corpus_histograms, emd_strategy_table, evaluate_level, AnalyticsError,
    EmdTable, Improvement, Metric, MetricRow, MetricSelection,
};
use crate::corpus::{Manifest, Split, TileKind, TileReader};
use crate::generators::Palette;
use crate::strategies::{Level, MultiScaleAtlas, Provenance, StrategyKind};

pub const CSV_HEADER: &str = "zoom,strategy,ssim,essi,iou_road,iou_water";
const CSV_META: &str = "# report ";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("structured report: {0}")]
    Json(String),
    #[error("{0}")]
    Domain(String),
    #[error("zoom coverage gaps: {}", .0.join("; "))]
    Coverage(Vec<String>),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRef {
    pub run: String,
    #[serde(flatten)]
    pub provenance: Provenance,
}

impl From<&Provenance> for RunRef {
    fn from(p: &Provenance) -> Self {
        RunRef {
            run: p.run_name(),
            provenance: p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReportProvenance {
    #[serde(default)]
    pub runs: Vec<RunRef>,
    #[serde(default)]
    pub manifest_hash: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub metrics: MetricSelection,
    #[serde(default)]
    pub palette: Option<Palette>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: ReportProvenance,
    pub rows: Vec<MetricRow>,
    #[serde(default)]
    pub emd: Option<EmdTable>,
    #[serde(default)]
    pub improvements: Vec<Improvement>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CsvMeta {
    provenance: ReportProvenance,
    emd: Option<EmdTable>,
    improvements: Vec<Improvement>,
    warnings: Vec<String>,
}

fn sort_rows(rows: &mut [MetricRow]) {
    rows.sort_by(|a, b| b.zoom.cmp(&a.zoom).then(a.strategy.cmp(&b.strategy)));
}

/// Average series-over-parallel change for every selected metric that has
/// values in both strategies.
pub fn improvements(
    rows: &[MetricRow],
    selection: &MetricSelection,
) -> Result<Vec<Improvement>, ReportError> {
    let (series, parallel): (Vec<MetricRow>, Vec<MetricRow>) = rows
        .iter()
        .cloned()
        .partition(|r| r.strategy == StrategyKind::Series);
    if series.is_empty() || parallel.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for m in Metric::ALL {
        let present = |rs: &[MetricRow]| rs.iter().any(|r| r.get(m).is_some());
        if selection.contains(m) && present(&series) && present(&parallel) {
            out.push(aggregate_improvement(&series, &parallel, m)?);
        }
    }
    Ok(out)
}

impl Report {
    /// A report over precomputed rows, with improvements derived from them.
    pub fn from_rows(
        mut rows: Vec<MetricRow>,
        provenance: ReportProvenance,
    ) -> Result<Self, ReportError> {
        sort_rows(&mut rows);
        let improvements = improvements(&rows, &provenance.metrics)?;
        Ok(Report {
            provenance,
            rows,
            emd: None,
            improvements,
            warnings: Vec::new(),
        })
    }

    pub fn improvement(&self, metric: Metric) -> Option<&Improvement> {
        self.improvements.iter().find(|i| i.metric == metric)
    }

    pub fn zooms(&self) -> Vec<u8> {
        let set: BTreeSet<u8> = self.rows.iter().map(|r| r.zoom).collect();
        set.into_iter().rev().collect()
    }

    /// Rows in the fixed column order, then one comment line carrying the
    /// rest of the report as JSON.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.zoom,
                r.strategy,
                cell(r.ssim),
                cell(r.essi),
                cell(r.iou_road),
                cell(r.iou_water)
            );
        }
        let meta = CsvMeta {
            provenance: self.provenance.clone(),
            emd: self.emd.clone(),
            improvements: self.improvements.clone(),
            warnings: self.warnings.clone(),
        };
        out.push_str(CSV_META);
        out.push_str(&serde_json::to_string(&meta).expect("report serializes"));
        out.push('\n');
        out
    }

    /// Parses [`Report::to_csv`] output. Without the trailing comment line the
    /// rows are taken as precomputed and improvements are derived from them.
    pub fn from_csv(text: &str) -> Result<Self, ReportError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => {
                return Err(ReportError::Csv {
                    line: 1,
                    reason: format!("expected header {CSV_HEADER:?}"),
                })
            }
        }
        let mut rows = Vec::new();
        let mut meta: Option<CsvMeta> = None;
        for (i, line) in lines {
            let line_no = i + 1;
            let err = |reason: String| ReportError::Csv {
                line: line_no,
                reason,
            };
            if let Some(json) = line.strip_prefix(CSV_META) {
                meta = Some(serde_json::from_str(json).map_err(|e| err(e.to_string()))?);
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(err(format!("{} fields, expected 6", f.len())));
            }
            let zoom = f[0]
                .parse()
                .map_err(|_| err(format!("bad zoom {:?}", f[0])))?;
            let strategy = f[1].parse().map_err(err)?;
            let mut values = [None; 4];
            for (k, v) in values.iter_mut().enumerate() {
                let s = f[2 + k];
                if !s.is_empty() {
                    *v = Some(
                        s.parse::<f64>()
                            .map_err(|_| err(format!("bad value {s:?}")))?,
                    );
                }
            }
            rows.push(MetricRow {
                zoom,
                strategy,
                ssim: values[0],
                essi: values[1],
                iou_road: values[2],
                iou_water: values[3],
            });
        }
        match meta {
            Some(m) => Ok(Report {
                provenance: m.provenance,
                rows,
                emd: m.emd,
                improvements: m.improvements,
                warnings: m.warnings,
            }),
            None => Report::from_rows(rows, ReportProvenance::default()),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        serde_json::from_str(text).map_err(|e| ReportError::Json(e.to_string()))
    }
}

const CHART_W: f64 = 480.0;
const CHART_H: f64 = 280.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 40.0;

fn strategy_color(s: StrategyKind) -> &'static str {
    match s {
        StrategyKind::Series => "#d62728",
        StrategyKind::Parallel => "#1f77b4",
    }
}

/// One line chart per metric with values, zoom descending left to right,
/// one polyline per strategy.
pub fn trend_svg(report: &Report) -> Result<String, ReportError> {
    let zooms = report.zooms();
    if zooms.len() < 2 {
        return Err(ReportError::Domain(format!(
            "trend chart needs at least 2 zoom levels, report has {}",
            zooms.len()
        )));
    }
    let metrics: Vec<Metric> = Metric::ALL
        .into_iter()
        .filter(|m| report.rows.iter().any(|r| r.get(*m).is_some()))
        .collect();
    let strategies: BTreeSet<StrategyKind> = report.rows.iter().map(|r| r.strategy).collect();
    let total_h = CHART_H * metrics.len().max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CHART_W}" height="{total_h}" viewBox="0 0 {CHART_W} {total_h}" font-family="sans-serif" font-size="11">"#
    );
    let plot_w = CHART_W - MARGIN_L - MARGIN_R;
    let plot_h = CHART_H - MARGIN_T - MARGIN_B;
    let x_of = |i: usize| MARGIN_L + plot_w * i as f64 / (zooms.len() - 1) as f64;
    for (k, m) in metrics.iter().enumerate() {
        let top = CHART_H * k as f64;
        let values: Vec<f64> = report.rows.iter().filter_map(|r| r.get(*m)).collect();
        let (mut lo, mut hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(*v), b.max(*v))
            });
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        } else {
            let pad = (hi - lo) * 0.05;
            lo -= pad;
            hi += pad;
        }
        let y_of = |v: f64| top + MARGIN_T + plot_h * (hi - v) / (hi - lo);
        let _ = writeln!(svg, r#"<g class="chart" data-metric="{m}">"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{m}</text>"#,
            CHART_W / 2.0,
            top + 20.0
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN_L:.2}" y="{:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="#888"/>"##,
            top + MARGIN_T
        );
        for (i, z) in zooms.iter().enumerate() {
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{z}</text>"#,
                x_of(i),
                top + MARGIN_T + plot_h + 16.0
            );
        }
        for v in [lo, (lo + hi) / 2.0, hi] {
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
                MARGIN_L - 6.0,
                y_of(v) + 4.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">zoom</text>"#,
            MARGIN_L + plot_w / 2.0,
            top + CHART_H - 6.0
        );
        for (j, s) in strategies.iter().enumerate() {
            let by_zoom: BTreeMap<u8, f64> = report
                .rows
                .iter()
                .filter(|r| r.strategy == *s)
                .filter_map(|r| r.get(*m).map(|v| (r.zoom, v)))
                .collect();
            let points: Vec<String> = zooms
                .iter()
                .enumerate()
                .filter_map(|(i, z)| {
                    by_zoom
                        .get(z)
                        .map(|v| format!("{:.2},{:.2}", x_of(i), y_of(*v)))
                })
                .collect();
            let color = strategy_color(*s);
            let _ = writeln!(
                svg,
                r#"<polyline class="{s}" data-metric="{m}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                points.join(" ")
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" fill="{color}">{s}</text>"#,
                CHART_W - MARGIN_R - 60.0,
                top + MARGIN_T + 14.0 + 14.0 * j as f64
            );
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Real test-split map tiles at the coordinates of `level`.
fn real_level(m: &Manifest, reader: &dyn TileReader, level: &Level) -> Result<Level, ReportError> {
    let mut out = Level::new();
    for c in level.keys() {
        if let Some(e) = m.find(TileKind::Map, *c).filter(|e| e.split == Split::Test) {
            out.insert(*c, reader.read(e)?);
        }
    }
    Ok(out)
}

/// Scores each run against the corpus maps and assembles a report with
/// metric rows, the EMD table and improvements.
pub fn evaluate(
    runs: &[MultiScaleAtlas],
    m: &Manifest,
    reader: &dyn TileReader,
    palette: &Palette,
    selection: &MetricSelection,
    seed: u64,
) -> Result<Report, ReportError> {
    let mut provenance = ReportProvenance {
        runs: runs.iter().map(|r| RunRef::from(&r.provenance)).collect(),
        manifest_hash: Some(m.hash()),
        seed,
        metrics: selection.clone(),
        palette: Some(palette.clone()),
    };
    if selection.is_empty() {
        provenance.palette = None;
        return Ok(Report {
            provenance,
            rows: Vec::new(),
            emd: None,
            improvements: Vec::new(),
            warnings: Vec::new(),
        });
    }
    if runs.is_empty() {
        return Err(ReportError::Domain("no runs to evaluate".into()));
    }

    let mut gaps = Vec::new();
    for run in runs {
        let p = &run.provenance;
        for z in (p.bottom_zoom..=p.top_zoom).rev() {
            match run.level(z) {
                Some(l) if !l.is_empty() => {
                    if !l.keys().any(|c| {
                        m.find(TileKind::Map, *c)
                            .is_some_and(|e| e.split == Split::Test)
                    }) {
                        gaps.push(format!("{}: no real test maps at zoom {z}", p.run_name()));
                    }
                }
                _ => gaps.push(format!("{}: no generated tiles at zoom {z}", p.run_name())),
            }
        }
    }
    if !gaps.is_empty() {
        return Err(ReportError::Coverage(gaps));
    }

    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for run in runs {
        let p = &run.provenance;
        for z in (p.bottom_zoom..=p.top_zoom).rev() {
            let generated = run.level(z).expect("coverage checked");
            let real = real_level(m, reader, generated)?;
            let ev = evaluate_level(z, p.strategy, generated, &real, palette, selection)?;
            if !ev.unmatched.is_empty() {
                warnings.push(format!(
                    "{} zoom {z}: {} generated tiles have no real map",
                    p.run_name(),
                    ev.unmatched.len()
                ));
            }
            rows.push(ev.row);
        }
    }

    let top = runs
        .iter()
        .map(|r| r.provenance.top_zoom)
        .max()
        .expect("runs non-empty");
    let bottom = runs
        .iter()
        .map(|r| r.provenance.bottom_zoom)
        .min()
        .expect("runs non-empty");
    let zooms = bottom..=top;
    let rsi = corpus_histograms(m, reader, TileKind::Rsi, Some(Split::Test), zooms.clone())?;
    let maps = corpus_histograms(m, reader, TileKind::Map, Some(Split::Test), zooms)?;
    let emd = match emd_strategy_table(&rsi, &maps, top, bottom) {
        Ok(t) => Some(t),
        Err(AnalyticsError::Coverage(missing)) => {
            warnings.push(format!("EMD table skipped, missing {}", missing.join(", ")));
            None
        }
        Err(e) => return Err(e.into()),
    };

    let mut report = Report::from_rows(rows, provenance)?;
    for imp in &report.improvements {
        warnings.extend(imp.warnings.iter().cloned());
    }
    for w in &warnings {
        warn!("{w}");
    }
    report.emd = emd;
    report.warnings = warnings;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::EmdRow;

    fn row(zoom: u8, strategy: StrategyKind, v: [Option<f64>; 4]) -> MetricRow {
        MetricRow {
            zoom,
            strategy,
            ssim: v[0],
            essi: v[1],
            iou_road: v[2],
            iou_water: v[3],
        }
    }

    fn sample() -> Report {
        let rows = vec![
            row(
                14,
                StrategyKind::Parallel,
                [Some(0.25), Some(0.1), None, Some(1.0 / 3.0)],
            ),
            row(
                14,
                StrategyKind::Series,
                [Some(0.5), Some(0.2), Some(0.7), None],
            ),
            row(
                13,
                StrategyKind::Parallel,
                [Some(0.125), Some(0.3), Some(0.1), Some(0.2)],
            ),
            row(
                13,
                StrategyKind::Series,
                [Some(0.25), Some(0.6), Some(0.3), Some(0.1)],
            ),
        ];
        let mut r = Report::from_rows(rows, ReportProvenance::default()).unwrap();
        r.emd = Some(EmdTable {
            rows: vec![EmdRow {
                zoom: 14,
                parallel: 0.1 + 0.2,
                series: 1e-7,
            }],
        });
        r.warnings.push("w".into());
        r
    }

    #[test]
    fn rows_sorted_deepest_first() {
        let r = sample();
        let order: Vec<_> = r.rows.iter().map(|r| (r.zoom, r.strategy)).collect();
        assert_eq!(
            order,
            [
                (14, StrategyKind::Series),
                (14, StrategyKind::Parallel),
                (13, StrategyKind::Series),
                (13, StrategyKind::Parallel)
            ]
        );
    }

    #[test]
    fn csv_round_trip() {
        let r = sample();
        let text = r.to_csv();
        assert!(text
            .starts_with("zoom,strategy,ssim,essi,iou_road,iou_water\n14,series,0.5,0.2,0.7,\n"));
        assert_eq!(Report::from_csv(&text).unwrap(), r);
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        assert_eq!(Report::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn bare_rows_get_improvements() {
        let text = "zoom,strategy,ssim,essi,iou_road,iou_water\n2,series,0.5,,,\n2,parallel,0.5,,,\n1,series,0.6,,,\n1,parallel,0.4,,,\n";
        let r = Report::from_csv(text).unwrap();
        assert_eq!(r.improvement(Metric::Ssim).unwrap().percent, Some(50.0));
        assert!(r.improvement(Metric::Essi).is_none());
    }

    #[test]
    fn csv_errors_carry_line() {
        let bad = "zoom,strategy,ssim,essi,iou_road,iou_water\n3,series,x,,,\n";
        assert!(matches!(
            Report::from_csv(bad),
            Err(ReportError::Csv { line: 2, .. })
        ));
        assert!(Report::from_csv("zoom,ssim\n").is_err());
    }

    #[test]
    fn svg_needs_two_zooms() {
        let r = Report::from_rows(
            vec![row(3, StrategyKind::Series, [Some(1.0), None, None, None])],
            ReportProvenance::default(),
        )
        .unwrap();
        assert!(matches!(trend_svg(&r), Err(ReportError::Domain(_))));
    }

    #[test]
    fn svg_minimal_and_deterministic() {
        let r = sample();
        let a = trend_svg(&r).unwrap();
        assert_eq!(a, trend_svg(&r.clone()).unwrap());
        assert_eq!(a.matches("<polyline").count(), 8);
        let first = a.lines().find(|l| l.contains("<polyline")).unwrap();
        let pts = first.split("points=\"").nth(1).unwrap();
        assert_eq!(pts.trim_end_matches("\"/>").split(' ').count(), 2);
    }
}
