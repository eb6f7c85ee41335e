//! Translation endpoints for each edge of a strategy's pipeline graph.
//!
//! A [`GeneratorHandle`] turns one tile into another. Built-in backends are
//! deterministic image operations used as stand-ins for trained models; the
//! `plugin` backend forwards tiles to an external process speaking the
//! length-prefixed PNG protocol in [`plugin`].

pub mod plugin;
mod registry;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tile::{GeometryError, TileImage};

pub use plugin::{spawn_plugin, spawn_plugin_pool, PluginOptions, PluginPool};
pub use registry::{
    load_registry, required_edges, BackendConfig, EdgeConfig, Registry, RegistryConfig,
    RegistryError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    R2m,
    M2m,
}

/// One translation step: `r2m@17` (remote sensing to map, same zoom) or
/// `m2m@17-16` (map to the next smaller-scale map).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeId {
    pub kind: EdgeKind,
    pub input_zoom: u8,
    pub output_zoom: u8,
}

impl EdgeId {
    pub fn r2m(zoom: u8) -> Self {
        EdgeId {
            kind: EdgeKind::R2m,
            input_zoom: zoom,
            output_zoom: zoom,
        }
    }

    pub fn m2m(input_zoom: u8) -> Self {
        EdgeId {
            kind: EdgeKind::M2m,
            input_zoom,
            output_zoom: input_zoom.wrapping_sub(1),
        }
    }

    pub fn is_valid(&self) -> bool {
        match self.kind {
            EdgeKind::R2m => self.input_zoom == self.output_zoom,
            EdgeKind::M2m => self.input_zoom >= 1 && self.output_zoom + 1 == self.input_zoom,
        }
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            EdgeKind::R2m => write!(f, "r2m@{}", self.input_zoom),
            EdgeKind::M2m => write!(f, "m2m@{}-{}", self.input_zoom, self.output_zoom),
        }
    }
}

impl FromStr for EdgeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("invalid edge id {s:?} (expected r2m@Z or m2m@Z-(Z-1))");
        let (kind, zooms) = s.split_once('@').ok_or_else(bad)?;
        let edge = match kind {
            "r2m" => EdgeId::r2m(zooms.parse().map_err(|_| bad())?),
            "m2m" => {
                let (a, b) = zooms.split_once('-').ok_or_else(bad)?;
                EdgeId {
                    kind: EdgeKind::M2m,
                    input_zoom: a.parse().map_err(|_| bad())?,
                    output_zoom: b.parse().map_err(|_| bad())?,
                }
            }
            _ => return Err(bad()),
        };
        if !edge.is_valid() {
            return Err(format!("edge {s:?}: m2m must step down exactly one zoom"));
        }
        Ok(edge)
    }
}

impl Serialize for EdgeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EdgeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub const BACKGROUND: &str = "background";
pub const ROAD: &str = "road";
pub const WATER: &str = "water";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub class: String,
    pub color: [u8; 3],
}

/// Ordered (class, color) list. Several colors may share a class; earlier
/// entries win distance ties.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct Palette {
    entries: Vec<PaletteEntry>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PaletteError {
    #[error("palette is empty")]
    Empty,
    #[error("palette repeats color {0:?}")]
    DuplicateColor([u8; 3]),
    #[error("palette has no {BACKGROUND:?} class")]
    NoBackground,
}

impl Palette {
    pub fn new(entries: Vec<PaletteEntry>) -> Result<Self, PaletteError> {
        if entries.is_empty() {
            return Err(PaletteError::Empty);
        }
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.color == e.color) {
                return Err(PaletteError::DuplicateColor(e.color));
            }
        }
        if !entries.iter().any(|e| e.class == BACKGROUND) {
            return Err(PaletteError::NoBackground);
        }
        Ok(Palette { entries })
    }

    pub fn from_pairs<S: Into<String>>(
        pairs: impl IntoIterator<Item = (S, [u8; 3])>,
    ) -> Result<Self, PaletteError> {
        Palette::new(
            pairs
                .into_iter()
                .map(|(class, color)| PaletteEntry {
                    class: class.into(),
                    color,
                })
                .collect(),
        )
    }

    /// Colors close to a typical web map style.
    pub fn standard() -> Self {
        Palette::from_pairs([
            (BACKGROUND, [242, 239, 233]),
            (ROAD, [255, 255, 255]),
            (WATER, [170, 211, 223]),
            ("vegetation", [200, 230, 180]),
            ("building", [217, 208, 201]),
        ])
        .expect("standard palette is valid")
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the entry nearest to `rgb` in squared RGB distance.
    pub fn nearest(&self, rgb: [u8; 3]) -> usize {
        let mut best = 0;
        let mut best_d = u32::MAX;
        for (i, e) in self.entries.iter().enumerate() {
            let d: u32 = (0..3)
                .map(|c| {
                    let diff = i32::from(rgb[c]) - i32::from(e.color[c]);
                    (diff * diff) as u32
                })
                .sum();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    pub fn color(&self, index: usize) -> [u8; 3] {
        self.entries[index].color
    }

    pub fn class(&self, index: usize) -> &str {
        &self.entries[index].class
    }
}

impl<'de> Deserialize<'de> for Palette {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let entries = Vec::<PaletteEntry>::deserialize(d)?;
        Palette::new(entries).map_err(serde::de::Error::custom)
    }
}

/// Replaces every pixel by its nearest palette color.
pub fn palette_project(t: &TileImage, p: &Palette) -> TileImage {
    t.map_pixels(|px| p.color(p.nearest(px)))
}

/// Box blur over a `(2r+1)²` window with clamped borders, then palette
/// projection. A deliberately lossy m2m stand-in.
pub fn degrade_blur(t: &TileImage, radius: u32, p: &Palette) -> TileImage {
    if radius == 0 {
        return palette_project(t, p);
    }
    let s = t.size() as i64;
    let r = radius as i64;
    let src = t.as_bytes();
    let n = (2 * r + 1) * (2 * r + 1);
    let blurred = TileImage::from_fn(t.size(), |x, y| {
        let mut acc = [0i64; 3];
        for dy in -r..=r {
            let yy = (y as i64 + dy).clamp(0, s - 1);
            for dx in -r..=r {
                let xx = (x as i64 + dx).clamp(0, s - 1);
                let i = ((yy * s + xx) * 3) as usize;
                for c in 0..3 {
                    acc[c] += i64::from(src[i + c]);
                }
            }
        }
        acc.map(|v| ((2 * v + n) / (2 * n)) as u8)
    })
    .expect("same size as the input tile");
    palette_project(&blurred, p)
}

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("{edge}: expected a {expected}x{expected} tile, got {actual}x{actual}")]
    Shape {
        edge: EdgeId,
        expected: u32,
        actual: u32,
    },
    #[error("{edge}: plugin failed: {message}{}", fmt_diag(.diagnostics))]
    Backend {
        edge: EdgeId,
        message: String,
        diagnostics: String,
    },
    #[error("{edge}: framing error: {message}{}", fmt_diag(.diagnostics))]
    Framing {
        edge: EdgeId,
        message: String,
        diagnostics: String,
    },
    #[error("{edge}: plugin timed out after {seconds:.1}s")]
    Timeout { edge: EdgeId, seconds: f64 },
    #[error("{edge}: plugin refused handshake: {reason}")]
    Refused { edge: EdgeId, reason: String },
    #[error("{edge}: plugin handle is poisoned ({reason})")]
    Poisoned { edge: EdgeId, reason: String },
    #[error("{edge}: cannot start plugin {command:?}: {source}")]
    Spawn {
        edge: EdgeId,
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn fmt_diag(d: &str) -> String {
    if d.trim().is_empty() {
        String::new()
    } else {
        format!(" [stderr: {}]", d.trim())
    }
}

impl GeneratorError {
    pub fn edge(&self) -> Option<EdgeId> {
        match self {
            GeneratorError::Shape { edge, .. }
            | GeneratorError::Backend { edge, .. }
            | GeneratorError::Framing { edge, .. }
            | GeneratorError::Timeout { edge, .. }
            | GeneratorError::Refused { edge, .. }
            | GeneratorError::Poisoned { edge, .. }
            | GeneratorError::Spawn { edge, .. } => Some(*edge),
            GeneratorError::Geometry(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backend {
    Identity,
    PaletteProject(Palette),
    DegradeBlur { radius: u32, palette: Palette },
    Plugin(Arc<PluginPool>),
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Identity => "identity",
            Backend::PaletteProject(_) => "palette_project",
            Backend::DegradeBlur { .. } => "degrade_blur",
            Backend::Plugin(_) => "plugin",
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Backend::Plugin(_))
    }
}

/// A generator bound to one pipeline edge and one tile size.
#[derive(Debug, Clone)]
pub struct GeneratorHandle {
    pub edge: EdgeId,
    pub tile_size: u32,
    pub backend: Backend,
}

impl GeneratorHandle {
    pub fn new(edge: EdgeId, tile_size: u32, backend: Backend) -> Self {
        GeneratorHandle {
            edge,
            tile_size,
            backend,
        }
    }

    pub fn identity(edge: EdgeId, tile_size: u32) -> Self {
        GeneratorHandle::new(edge, tile_size, Backend::Identity)
    }

    pub fn translate(&self, t: &TileImage) -> Result<TileImage, GeneratorError> {
        if t.size() != self.tile_size {
            return Err(GeneratorError::Shape {
                edge: self.edge,
                expected: self.tile_size,
                actual: t.size(),
            });
        }
        Ok(match &self.backend {
            Backend::Identity => t.clone(),
            Backend::PaletteProject(p) => palette_project(t, p),
            Backend::DegradeBlur { radius, palette } => degrade_blur(t, *radius, palette),
            Backend::Plugin(pool) => pool.translate(t)?,
        })
    }
}
