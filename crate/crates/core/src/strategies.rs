//! Parallel and series orchestration of generators over a tile corpus.
//!
//! The parallel strategy translates remote-sensing tiles with an independent
//! r2m generator at every zoom. The series strategy translates only the top
//! zoom and derives every smaller scale by merging quads of the previous
//! generated level and passing them through an m2m generator.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    ingest, sha256_hex, write_tile, CorpusError, Manifest, ManifestEntry, Split, SplitPolicy,
    TileKind, TileReader, MANIFEST_FILE,
};
use crate::generators::{
    EdgeId, EdgeKind, GeneratorError, GeneratorHandle, Registry, RegistryError,
};
use crate::tile::{group_quads, merge_downsample, GeometryError, TileCoord, TileImage};

/// Generated tiles of one zoom.
pub type Level = BTreeMap<TileCoord, TileImage>;

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Series,
    Parallel,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::Series => "series",
            StrategyKind::Parallel => "parallel",
        })
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "series" => Ok(StrategyKind::Series),
            "parallel" => Ok(StrategyKind::Parallel),
            other => Err(format!("unknown strategy {other:?} (series|parallel)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default = "default_top")]
    pub top_zoom: u8,
    #[serde(default = "default_bottom")]
    pub bottom_zoom: u8,
}

fn default_top() -> u8 {
    crate::corpus::DEFAULT_TOP_ZOOM
}

fn default_bottom() -> u8 {
    crate::corpus::DEFAULT_BOTTOM_ZOOM
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, top_zoom: u8, bottom_zoom: u8) -> Self {
        StrategyConfig {
            kind,
            top_zoom,
            bottom_zoom,
        }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.top_zoom <= self.bottom_zoom {
            return Err(StrategyError::Config(format!(
                "top zoom {} must be above bottom zoom {}",
                self.top_zoom, self.bottom_zoom
            )));
        }
        if self.top_zoom > crate::tile::MAX_ZOOM {
            return Err(StrategyError::Config(format!(
                "top zoom {} exceeds {}",
                self.top_zoom,
                crate::tile::MAX_ZOOM
            )));
        }
        Ok(())
    }

    pub fn zooms(&self) -> impl DoubleEndedIterator<Item = u8> {
        self.bottom_zoom..=self.top_zoom
    }
}

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StrategyError {
    /// True when the failure is caused by configuration rather than data or
    /// a runtime fault.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            StrategyError::Config(_)
                | StrategyError::Registry(
                    RegistryError::Missing { .. } | RegistryError::Duplicate(_)
                )
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: StrategyKind,
    pub top_zoom: u8,
    pub bottom_zoom: u8,
    pub registry_hash: String,
    pub manifest_hash: String,
}

impl Provenance {
    /// Directory name for a run: strategy plus a short hash of everything
    /// that determines its output.
    pub fn run_name(&self) -> String {
        let key = format!(
            "{}|{}|{}|{}|{}",
            self.strategy, self.top_zoom, self.bottom_zoom, self.registry_hash, self.manifest_hash
        );
        format!("{}-{}", self.strategy, &sha256_hex(key.as_bytes())[..12])
    }
}

/// Every generated tile of one run, keyed by zoom.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleAtlas {
    pub levels: BTreeMap<u8, Level>,
    /// City each generated tile belongs to.
    pub cities: BTreeMap<TileCoord, String>,
    pub provenance: Provenance,
    pub warnings: Vec<String>,
}

impl MultiScaleAtlas {
    pub fn level(&self, zoom: u8) -> Option<&Level> {
        self.levels.get(&zoom)
    }

    pub fn level_sizes(&self) -> BTreeMap<u8, usize> {
        self.levels.iter().map(|(z, l)| (*z, l.len())).collect()
    }
}

/// Runs `f` on a pool of `workers` threads.
fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, StrategyError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| StrategyError::Config(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn generator(registry: &Registry, edge: EdgeId) -> Result<&GeneratorHandle, StrategyError> {
    registry
        .get(&edge)
        .ok_or_else(|| StrategyError::Config(format!("registry has no generator for edge {edge}")))
}

fn test_rsi(
    m: &Manifest,
    zoom: u8,
    cities: &mut BTreeMap<TileCoord, String>,
) -> Result<Vec<ManifestEntry>, StrategyError> {
    let entries: Vec<ManifestEntry> = m
        .select(TileKind::Rsi, zoom, Some(Split::Test))
        .cloned()
        .collect();
    for e in &entries {
        if let Some(prev) = cities.insert(e.coord, e.city.clone()) {
            if prev != e.city {
                return Err(StrategyError::Config(format!(
                    "tile {} appears in both {prev} and {}",
                    e.coord, e.city
                )));
            }
        }
    }
    Ok(entries)
}

fn translate_entries(
    entries: &[ManifestEntry],
    reader: &dyn TileReader,
    g: &GeneratorHandle,
) -> Result<Level, StrategyError> {
    let tiles: Vec<(TileCoord, TileImage)> = entries
        .par_iter()
        .map(|e| {
            let tile = reader.read(e)?;
            Ok((e.coord, g.translate(&tile)?))
        })
        .collect::<Result<_, StrategyError>>()?;
    Ok(tiles.into_iter().collect())
}

/// One r2m generator per zoom over the test rsi tiles of that zoom.
pub fn run_parallel(
    m: &Manifest,
    reader: &dyn TileReader,
    registry: &Registry,
    cfg: &StrategyConfig,
    registry_hash: &str,
    workers: usize,
) -> Result<MultiScaleAtlas, StrategyError> {
    cfg.validate()?;
    if cfg.kind != StrategyKind::Parallel {
        return Err(StrategyError::Config(
            "run_parallel needs a parallel strategy config".into(),
        ));
    }
    registry.check(cfg)?;
    let mut cities = BTreeMap::new();
    let mut per_zoom = Vec::new();
    let mut missing = Vec::new();
    for zoom in cfg.zooms().rev() {
        let entries = test_rsi(m, zoom, &mut cities)?;
        if entries.is_empty() {
            missing.push(zoom.to_string());
        }
        per_zoom.push((zoom, entries));
    }
    if !missing.is_empty() {
        return Err(StrategyError::Config(format!(
            "no test rsi tiles at zoom(s) {}",
            missing.join(", ")
        )));
    }

    let mut levels = BTreeMap::new();
    for (zoom, entries) in per_zoom {
        let started = Instant::now();
        let g = generator(registry, EdgeId::r2m(zoom))?;
        let level = with_workers(workers, || translate_entries(&entries, reader, g))??;
        info!(
            "parallel zoom {zoom}: {} tiles in {:.2?}",
            level.len(),
            started.elapsed()
        );
        levels.insert(zoom, level);
    }
    Ok(MultiScaleAtlas {
        levels,
        cities,
        provenance: Provenance {
            strategy: StrategyKind::Parallel,
            top_zoom: cfg.top_zoom,
            bottom_zoom: cfg.bottom_zoom,
            registry_hash: registry_hash.to_string(),
            manifest_hash: m.hash(),
        },
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeriesStep {
    pub level: Level,
    /// Parents at the output zoom whose quads were missing children.
    pub incomplete: Vec<TileCoord>,
}

/// Merges every complete quad of `level` and translates it with the m2m
/// generator `g`. Runs on the current rayon pool.
pub fn series_step(level: &Level, g: &GeneratorHandle) -> Result<SeriesStep, StrategyError> {
    let Some(zoom) = level.keys().next().map(|c| c.zoom) else {
        return Ok(SeriesStep::default());
    };
    if level.keys().any(|c| c.zoom != zoom) {
        return Err(StrategyError::Config("series level mixes zooms".into()));
    }
    if g.edge.kind != EdgeKind::M2m || g.edge.input_zoom != zoom {
        return Err(StrategyError::Config(format!(
            "generator for {} cannot consume a zoom-{zoom} level",
            g.edge
        )));
    }
    let (complete, incomplete) = group_quads(level.keys().copied());
    let quads: Vec<(TileCoord, [TileCoord; 4])> = complete.into_iter().collect();
    let tiles: Vec<(TileCoord, TileImage)> = quads
        .par_iter()
        .map(|(parent, kids)| {
            let merged = merge_downsample(kids.map(|k| &level[&k]))?;
            Ok((*parent, g.translate(&merged)?))
        })
        .collect::<Result<_, StrategyError>>()?;
    Ok(SeriesStep {
        level: tiles.into_iter().collect(),
        incomplete,
    })
}

/// r2m at the top zoom, then repeated merge + m2m down to the bottom zoom.
pub fn run_series(
    m: &Manifest,
    reader: &dyn TileReader,
    registry: &Registry,
    cfg: &StrategyConfig,
    registry_hash: &str,
    workers: usize,
) -> Result<MultiScaleAtlas, StrategyError> {
    cfg.validate()?;
    if cfg.kind != StrategyKind::Series {
        return Err(StrategyError::Config(
            "run_series needs a series strategy config".into(),
        ));
    }
    registry.check(cfg)?;
    let mut cities = BTreeMap::new();
    let top_entries = test_rsi(m, cfg.top_zoom, &mut cities)?;
    if top_entries.is_empty() {
        return Err(StrategyError::Config(format!(
            "no test rsi tiles at top zoom {}",
            cfg.top_zoom
        )));
    }
    let mut warnings = Vec::new();
    let mut levels = BTreeMap::new();

    let started = Instant::now();
    let r2m = generator(registry, EdgeId::r2m(cfg.top_zoom))?;
    let mut current = with_workers(workers, || translate_entries(&top_entries, reader, r2m))??;
    info!(
        "series zoom {}: {} tiles in {:.2?}",
        cfg.top_zoom,
        current.len(),
        started.elapsed()
    );

    for zoom in ((cfg.bottom_zoom + 1)..=cfg.top_zoom).rev() {
        let g = generator(registry, EdgeId::m2m(zoom))?;
        let started = Instant::now();
        let step = with_workers(workers, || series_step(&current, g))??;
        if !step.incomplete.is_empty() {
            let msg = format!(
                "zoom {}: dropped {} incomplete quad(s): {}",
                zoom - 1,
                step.incomplete.len(),
                step.incomplete
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            warn!("{msg}");
            warnings.push(msg);
        }
        for parent in step.level.keys() {
            let child = parent.children()?[0];
            if let Some(city) = cities.get(&child).cloned() {
                cities.insert(*parent, city);
            }
        }
        info!(
            "series zoom {}: {} tiles in {:.2?}",
            zoom - 1,
            step.level.len(),
            started.elapsed()
        );
        levels.insert(zoom, std::mem::replace(&mut current, step.level));
        if current.is_empty() {
            let msg = format!("zoom {}: no complete quads, stopping", zoom - 1);
            warn!("{msg}");
            warnings.push(msg);
            break;
        }
    }
    if !current.is_empty() {
        let zoom = current.keys().next().expect("non-empty").zoom;
        levels.insert(zoom, current);
    }
    Ok(MultiScaleAtlas {
        levels,
        cities,
        provenance: Provenance {
            strategy: StrategyKind::Series,
            top_zoom: cfg.top_zoom,
            bottom_zoom: cfg.bottom_zoom,
            registry_hash: registry_hash.to_string(),
            manifest_hash: m.hash(),
        },
        warnings,
    })
}

pub fn run_strategy(
    m: &Manifest,
    reader: &dyn TileReader,
    registry: &Registry,
    cfg: &StrategyConfig,
    registry_hash: &str,
    workers: usize,
) -> Result<MultiScaleAtlas, StrategyError> {
    match cfg.kind {
        StrategyKind::Series => run_series(m, reader, registry, cfg, registry_hash, workers),
        StrategyKind::Parallel => run_parallel(m, reader, registry, cfg, registry_hash, workers),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub provenance: Provenance,
    /// Tile count per zoom, deepest first.
    pub levels: Vec<(u8, usize)>,
    pub warnings: Vec<String>,
}

/// Writes the atlas under `out_root/{run name}` in the corpus layout, plus a
/// manifest and a run summary. Output bytes depend only on the atlas.
pub fn write_run(atlas: &MultiScaleAtlas, out_root: &Path) -> Result<PathBuf, StrategyError> {
    let dir = out_root.join(atlas.provenance.run_name());
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|source| StrategyError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    fs::create_dir_all(&dir).map_err(|source| StrategyError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut entries = Vec::new();
    for level in atlas.levels.values() {
        for (coord, tile) in level {
            let city = atlas
                .cities
                .get(coord)
                .map(String::as_str)
                .unwrap_or("unknown");
            entries.push(write_tile(
                &dir,
                city,
                TileKind::Map,
                *coord,
                Split::Test,
                tile,
            )?);
        }
    }
    Manifest::new(entries).write(&dir.join(MANIFEST_FILE))?;
    let summary = RunSummary {
        provenance: atlas.provenance.clone(),
        levels: atlas
            .levels
            .iter()
            .rev()
            .map(|(z, l)| (*z, l.len()))
            .collect(),
        warnings: atlas.warnings.clone(),
    };
    let path = dir.join(SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|source| StrategyError::Io { path, source })?;
    Ok(dir)
}

/// Reads a run directory written by [`write_run`].
pub fn load_run(dir: &Path) -> Result<MultiScaleAtlas, StrategyError> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|source| StrategyError::Io {
        path: path.clone(),
        source,
    })?;
    let summary: RunSummary = serde_json::from_str(&text)
        .map_err(|e| StrategyError::Config(format!("{}: {e}", path.display())))?;
    let found = ingest(dir, &SplitPolicy::all_test())?;
    let reader = crate::corpus::FsTileReader::new(dir);
    let mut levels: BTreeMap<u8, Level> = BTreeMap::new();
    let mut cities = BTreeMap::new();
    for e in found.manifest.entries() {
        let tile = reader.read(e)?;
        levels
            .entry(e.coord.zoom)
            .or_default()
            .insert(e.coord, tile);
        cities.insert(e.coord, e.city.clone());
    }
    Ok(MultiScaleAtlas {
        levels,
        cities,
        provenance: summary.provenance,
        warnings: summary.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{Backend, Palette};

    fn level(coords: &[TileCoord], size: u32) -> Level {
        coords
            .iter()
            .map(|c| {
                let seed = c.x * 7 + c.y * 13;
                (
                    *c,
                    TileImage::from_fn(size, |x, y| {
                        [(seed + x) as u8, (seed * 3 + y) as u8, (x * y) as u8]
                    })
                    .unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn single_quad_identity_step() {
        let kids = TileCoord::new(16, 5, 5).unwrap().children().unwrap();
        let lvl = level(&kids, 8);
        let g = GeneratorHandle::identity(EdgeId::m2m(17), 8);
        let step = series_step(&lvl, &g).unwrap();
        assert_eq!(step.level.len(), 1);
        let expected = merge_downsample(kids.map(|k| &lvl[&k])).unwrap();
        assert_eq!(step.level[&TileCoord::new(16, 5, 5).unwrap()], expected);
    }

    #[test]
    fn two_quads_two_tiles() {
        let mut coords = TileCoord::new(16, 0, 0)
            .unwrap()
            .children()
            .unwrap()
            .to_vec();
        coords.extend(TileCoord::new(16, 9, 3).unwrap().children().unwrap());
        let step = series_step(
            &level(&coords, 4),
            &GeneratorHandle::identity(EdgeId::m2m(17), 4),
        )
        .unwrap();
        assert_eq!(step.level.len(), 2);
        assert!(step.incomplete.is_empty());
    }

    #[test]
    fn step_rejects_wrong_edge() {
        let kids = TileCoord::new(16, 5, 5).unwrap().children().unwrap();
        let lvl = level(&kids, 4);
        for edge in [EdgeId::r2m(17), EdgeId::m2m(16)] {
            let g = GeneratorHandle::identity(edge, 4);
            assert!(matches!(
                series_step(&lvl, &g),
                Err(StrategyError::Config(_))
            ));
        }
    }

    #[test]
    fn step_applies_generator_after_merge() {
        let kids = TileCoord::new(16, 5, 5).unwrap().children().unwrap();
        let lvl = level(&kids, 8);
        let p = Palette::standard();
        let g = GeneratorHandle::new(EdgeId::m2m(17), 8, Backend::PaletteProject(p.clone()));
        let step = series_step(&lvl, &g).unwrap();
        let merged = merge_downsample(kids.map(|k| &lvl[&k])).unwrap();
        let tile = &step.level[&TileCoord::new(16, 5, 5).unwrap()];
        assert_eq!(tile, &crate::generators::palette_project(&merged, &p));
    }

    #[test]
    fn config_requires_descending_zooms() {
        assert!(StrategyConfig::new(StrategyKind::Series, 13, 13)
            .validate()
            .is_err());
        assert!(StrategyConfig::new(StrategyKind::Series, 17, 13)
            .validate()
            .is_ok());
    }
}
