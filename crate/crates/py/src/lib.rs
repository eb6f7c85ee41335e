//! Python bindings for the `mapseries` core: tile geometry, generators,
//! metrics, reports and strategy runs.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use mapseries_core::analytics::{self, Metric, MetricRow};
use mapseries_core::config::RunConfig;
use mapseries_core::corpus::{FsTileReader, Manifest, MANIFEST_FILE};
use mapseries_core::generators::{self as gen, load_registry, plugin};
use mapseries_core::report::{trend_svg, Report};
use mapseries_core::strategies::{self, StrategyKind};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

#[pyclass(module = "mapseries", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct TileCoord {
    inner: mapseries_core::TileCoord,
}

#[pymethods]
impl TileCoord {
    #[new]
    fn new(zoom: u8, x: u32, y: u32) -> PyResult<Self> {
        mapseries_core::TileCoord::new(zoom, x, y)
            .map(|inner| TileCoord { inner })
            .map_err(value_err)
    }

    #[getter]
    fn zoom(&self) -> u8 {
        self.inner.zoom
    }

    #[getter]
    fn x(&self) -> u32 {
        self.inner.x
    }

    #[getter]
    fn y(&self) -> u32 {
        self.inner.y
    }

    /// The four children in NW, NE, SW, SE order.
    fn children(&self) -> PyResult<Vec<TileCoord>> {
        let kids = self.inner.children().map_err(value_err)?;
        Ok(kids.iter().map(|&inner| TileCoord { inner }).collect())
    }

    fn parent(&self) -> PyResult<TileCoord> {
        self.inner
            .parent()
            .map(|inner| TileCoord { inner })
            .map_err(value_err)
    }

    fn quadrant(&self) -> usize {
        self.inner.quadrant()
    }

    fn __eq__(&self, other: &TileCoord) -> bool {
        self.inner == other.inner
    }

    fn __hash__(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.inner.hash(&mut h);
        h.finish()
    }

    fn __repr__(&self) -> String {
        format!(
            "TileCoord({}, {}, {})",
            self.inner.zoom, self.inner.x, self.inner.y
        )
    }
}

/// A square RGB tile whose edge is a power of two.
#[pyclass(module = "mapseries", frozen, from_py_object)]
#[derive(Clone)]
struct Tile {
    inner: mapseries_core::TileImage,
}

#[pymethods]
impl Tile {
    /// `data` is row-major RGB, `size * size * 3` bytes.
    #[new]
    fn new(size: u32, data: Vec<u8>) -> PyResult<Self> {
        mapseries_core::TileImage::new(size, data)
            .map(|inner| Tile { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    fn filled(size: u32, rgb: [u8; 3]) -> PyResult<Self> {
        mapseries_core::TileImage::filled(size, rgb)
            .map(|inner| Tile { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    fn from_png(data: &[u8]) -> PyResult<Self> {
        mapseries_core::TileImage::from_png(data)
            .map(|inner| Tile { inner })
            .map_err(value_err)
    }

    fn to_png<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_png())
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.as_bytes())
    }

    #[getter]
    fn size(&self) -> u32 {
        self.inner.size()
    }

    fn pixel(&self, x: u32, y: u32) -> PyResult<(u8, u8, u8)> {
        if x >= self.inner.size() || y >= self.inner.size() {
            return Err(PyIndexError::new_err(format!(
                "pixel ({x}, {y}) outside the tile"
            )));
        }
        let [r, g, b] = self.inner.pixel(x, y);
        Ok((r, g, b))
    }

    fn __eq__(&self, other: &Tile) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Tile(size={})", self.inner.size())
    }
}

#[pyclass(module = "mapseries", frozen, from_py_object)]
#[derive(Clone)]
struct Palette {
    inner: gen::Palette,
}

#[pymethods]
impl Palette {
    /// `entries` is a list of `(class, (r, g, b))`; one class must be
    /// `"background"`.
    #[new]
    fn new(entries: Vec<(String, [u8; 3])>) -> PyResult<Self> {
        gen::Palette::from_pairs(entries)
            .map(|inner| Palette { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    fn standard() -> Self {
        Palette {
            inner: gen::Palette::standard(),
        }
    }

    fn entries(&self) -> Vec<(String, (u8, u8, u8))> {
        self.inner
            .entries()
            .iter()
            .map(|e| (e.class.clone(), (e.color[0], e.color[1], e.color[2])))
            .collect()
    }

    fn nearest(&self, rgb: [u8; 3]) -> String {
        self.inner.class(self.inner.nearest(rgb)).to_string()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Per-pixel class labels of a tile.
#[pyclass(module = "mapseries", frozen)]
struct ClassMask {
    inner: analytics::ClassMask,
}

#[pymethods]
impl ClassMask {
    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    #[getter]
    fn width(&self) -> u32 {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.inner.height
    }

    fn class_at(&self, x: u32, y: u32) -> PyResult<String> {
        if x >= self.inner.width || y >= self.inner.height {
            return Err(PyIndexError::new_err(format!(
                "pixel ({x}, {y}) outside the mask"
            )));
        }
        Ok(self.inner.class_at(x, y).to_string())
    }

    fn count(&self, class: &str) -> usize {
        self.inner.count(class)
    }
}

#[pyfunction]
fn merge_downsample(quad: [Tile; 4]) -> PyResult<Tile> {
    let [a, b, c, d] = &quad;
    mapseries_core::merge_downsample([&a.inner, &b.inner, &c.inner, &d.inner])
        .map(|inner| Tile { inner })
        .map_err(value_err)
}

/// SSIM on the luma of two tiles.
#[pyfunction]
fn ssim(a: &Tile, b: &Tile) -> PyResult<f64> {
    analytics::ssim_rgb(&a.inner, &b.inner).map_err(value_err)
}

/// SSIM of the Sobel edge maps of two tiles.
#[pyfunction]
fn essi(a: &Tile, b: &Tile) -> PyResult<f64> {
    analytics::essi(&a.inner, &b.inner).map_err(value_err)
}

/// One-dimensional EMD between two probability distributions over the same
/// bins, normalized by the 255-step intensity range.
#[pyfunction]
fn emd(h1: Vec<f64>, h2: Vec<f64>) -> PyResult<f64> {
    analytics::emd(&h1, &h2).map_err(value_err)
}

/// Normalized 256-bin histogram of each RGB channel over `tiles`.
#[pyfunction]
fn pixel_histogram(tiles: Vec<Tile>) -> PyResult<Vec<Vec<f64>>> {
    let h = analytics::pixel_histogram(tiles.iter().map(|t| &t.inner)).map_err(value_err)?;
    Ok(h.channels.to_vec())
}

#[pyfunction]
fn palette_project(tile: &Tile, palette: &Palette) -> Tile {
    Tile {
        inner: gen::palette_project(&tile.inner, &palette.inner),
    }
}

#[pyfunction]
fn label_map(tile: &Tile, palette: &Palette) -> ClassMask {
    ClassMask {
        inner: analytics::label_map(&tile.inner, &palette.inner),
    }
}

/// Intersection over union of one class; `None` when neither mask has it.
#[pyfunction]
fn iou(pred: &ClassMask, truth: &ClassMask, class: &str) -> PyResult<Option<f64>> {
    analytics::iou(&pred.inner, &truth.inner, class).map_err(value_err)
}

fn rows_from(py_rows: Vec<(u8, f64)>, strategy: StrategyKind, metric: Metric) -> Vec<MetricRow> {
    py_rows
        .into_iter()
        .map(|(z, v)| {
            let mut r = MetricRow::empty(z, strategy);
            r.set(metric, Some(v));
            r
        })
        .collect()
}

/// Mean per-zoom change of series over parallel in percent, rounded to two
/// decimals. `series` and `parallel` are lists of `(zoom, value)`. Returns
/// `(percent, zooms used, warnings)`.
#[pyfunction]
#[pyo3(signature = (series, parallel, metric = "ssim"))]
fn aggregate_improvement(
    series: Vec<(u8, f64)>,
    parallel: Vec<(u8, f64)>,
    metric: &str,
) -> PyResult<(Option<f64>, Vec<u32>, Vec<String>)> {
    let m: Metric = metric.parse().map_err(value_err)?;
    let imp = analytics::aggregate_improvement(
        &rows_from(series, StrategyKind::Series, m),
        &rows_from(parallel, StrategyKind::Parallel, m),
        m,
    )
    .map_err(value_err)?;
    Ok((
        imp.percent,
        imp.zooms.into_iter().map(u32::from).collect(),
        imp.warnings,
    ))
}

/// Wraps `payload` in a plugin protocol frame.
#[pyfunction]
fn encode_frame<'py>(py: Python<'py>, payload: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let mut out = Vec::with_capacity(payload.len() + 4);
    plugin::write_frame(&mut out, payload).map_err(value_err)?;
    Ok(PyBytes::new(py, &out))
}

/// Splits a byte string into the payloads of the frames it holds.
#[pyfunction]
fn decode_frames<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Vec<Bound<'py, PyBytes>>> {
    let mut cursor = std::io::Cursor::new(data);
    let mut out = Vec::new();
    while let Some(f) = plugin::read_frame(&mut cursor).map_err(value_err)? {
        out.push(PyBytes::new(py, &f));
    }
    Ok(out)
}

/// Parses a CSV or JSON report and returns its average improvements as
/// `{metric: percent}`.
#[pyfunction]
fn report_improvements<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
    let report = parse_report(text)?;
    let d = PyDict::new(py);
    for imp in &report.improvements {
        d.set_item(imp.metric.name(), imp.percent)?;
    }
    Ok(d)
}

/// Renders the trend chart of a CSV or JSON report.
#[pyfunction]
fn report_svg(text: &str) -> PyResult<String> {
    trend_svg(&parse_report(text)?).map_err(value_err)
}

fn parse_report(text: &str) -> PyResult<Report> {
    if text.trim_start().starts_with('{') {
        Report::from_json(text).map_err(value_err)
    } else {
        Report::from_csv(text).map_err(value_err)
    }
}

/// Runs the strategy described by a configuration file and returns the run
/// directory. `strategy` and `workers` override the file.
#[pyfunction]
#[pyo3(signature = (config, strategy = None, workers = None))]
fn translate(
    py: Python<'_>,
    config: PathBuf,
    strategy: Option<&str>,
    workers: Option<usize>,
) -> PyResult<String> {
    let mut cfg = RunConfig::load(&config).map_err(value_err)?;
    if let Some(s) = strategy {
        cfg.strategy.kind = s.parse().map_err(value_err)?;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.validate_with_corpus().map_err(value_err)?;
    let manifest_path = cfg.corpus.root.join(MANIFEST_FILE);
    let m = Manifest::read(&manifest_path).map_err(|e| PyOSError::new_err(e.to_string()))?;
    py.detach(|| {
        let sc = cfg.strategy.config();
        let registry =
            load_registry(&cfg.registry, &sc, cfg.corpus.tile_size).map_err(value_err)?;
        let reader = FsTileReader::new(&cfg.corpus.root);
        let atlas = strategies::run_strategy(
            &m,
            &reader,
            &registry,
            &sc,
            &cfg.registry.hash(),
            cfg.workers,
        )
        .map_err(runtime_err)?;
        let dir = strategies::write_run(&atlas, &cfg.output.dir).map_err(runtime_err)?;
        Ok(dir.display().to_string())
    })
}

#[pymodule]
pub fn mapseries(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TileCoord>()?;
    m.add_class::<Tile>()?;
    m.add_class::<Palette>()?;
    m.add_class::<ClassMask>()?;
    m.add_function(wrap_pyfunction!(merge_downsample, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(essi, m)?)?;
    m.add_function(wrap_pyfunction!(emd, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(palette_project, m)?)?;
    m.add_function(wrap_pyfunction!(label_map, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(encode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frames, m)?)?;
    m.add_function(wrap_pyfunction!(report_improvements, m)?)?;
    m.add_function(wrap_pyfunction!(report_svg, m)?)?;
    m.add_function(wrap_pyfunction!(translate, m)?)?;
    m.add("PROTOCOL_VERSION", plugin::PROTOCOL_VERSION)?;
    m.add("MAX_FRAME_BYTES", plugin::MAX_FRAME_BYTES)?;
    Ok(())
}
