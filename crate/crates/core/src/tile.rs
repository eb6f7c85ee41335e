//! Tile addressing, quadtree relations and raster assembly.
//!
//! Tiles follow the XYZ slippy-map scheme: zoom `z` has `2^z × 2^z` tiles,
//! `x` grows eastwards and `y` grows southwards. Children of a tile are
//! always listed NW, NE, SW, SE.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Cursor;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Deepest zoom level a coordinate may address.
pub const MAX_ZOOM: u8 = 22;

/// Default edge length of a tile in pixels.
pub const DEFAULT_TILE_SIZE: u32 = 512;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("tile coordinate {0} is out of range")]
    OutOfRange(String),
    #[error("zoom {0} has no children below the maximum zoom {MAX_ZOOM}")]
    ZoomOverflow(u8),
    #[error("zoom 0 has no parent")]
    NoParent,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mosaic is missing tiles: {}", .0.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", "))]
    Incomplete(Vec<TileCoord>),
    #[error("image decode failed: {0}")]
    Decode(String),
}

/// A zoom/x/y tile address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileCoord {
    pub zoom: u8,
    pub x: u32,
    pub y: u32,
}

impl TileCoord {
    pub fn new(zoom: u8, x: u32, y: u32) -> Result<Self, GeometryError> {
        let coord = TileCoord { zoom, x, y };
        if zoom > MAX_ZOOM {
            return Err(GeometryError::OutOfRange(coord.to_string()));
        }
        let side = 1u64 << zoom;
        if u64::from(x) >= side || u64::from(y) >= side {
            return Err(GeometryError::OutOfRange(coord.to_string()));
        }
        Ok(coord)
    }

    /// Checks the coordinate invariants on a value that may have been
    /// constructed field by field.
    pub fn validate(&self) -> Result<(), GeometryError> {
        TileCoord::new(self.zoom, self.x, self.y).map(|_| ())
    }

    /// The four tiles one zoom deeper, in NW, NE, SW, SE order.
    pub fn children(&self) -> Result<[TileCoord; 4], GeometryError> {
        self.validate()?;
        if self.zoom >= MAX_ZOOM {
            return Err(GeometryError::ZoomOverflow(self.zoom));
        }
        let z = self.zoom + 1;
        let (x, y) = (self.x * 2, self.y * 2);
        Ok([
            TileCoord { zoom: z, x, y },
            TileCoord {
                zoom: z,
                x: x + 1,
                y,
            },
            TileCoord {
                zoom: z,
                x,
                y: y + 1,
            },
            TileCoord {
                zoom: z,
                x: x + 1,
                y: y + 1,
            },
        ])
    }

    pub fn parent(&self) -> Result<TileCoord, GeometryError> {
        self.validate()?;
        if self.zoom == 0 {
            return Err(GeometryError::NoParent);
        }
        Ok(TileCoord {
            zoom: self.zoom - 1,
            x: self.x / 2,
            y: self.y / 2,
        })
    }

    /// Position of this tile inside its parent's quad (0..4, NW NE SW SE).
    pub fn quadrant(&self) -> usize {
        ((self.y & 1) * 2 + (self.x & 1)) as usize
    }
}

impl fmt::Display for TileCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.zoom, self.x, self.y)
    }
}

/// A square 8-bit RGB raster, row-major, whose edge is a power of two.
#[derive(Clone, PartialEq, Eq)]
pub struct TileImage {
    size: u32,
    data: Vec<u8>,
}

impl fmt::Debug for TileImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TileImage")
            .field("size", &self.size)
            .field("bytes", &self.data.len())
            .finish()
    }
}

impl TileImage {
    pub fn new(size: u32, data: Vec<u8>) -> Result<Self, GeometryError> {
        if size == 0 || !size.is_power_of_two() {
            return Err(GeometryError::Shape(format!(
                "tile size {size} is not a power of two"
            )));
        }
        let expected = size as usize * size as usize * 3;
        if data.len() != expected {
            return Err(GeometryError::Shape(format!(
                "buffer of {} bytes for a {size}x{size} RGB tile (expected {expected})",
                data.len()
            )));
        }
        Ok(TileImage { size, data })
    }

    pub fn filled(size: u32, rgb: [u8; 3]) -> Result<Self, GeometryError> {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(size as usize * size as usize * 3)
            .collect();
        TileImage::new(size, data)
    }

    /// Builds a tile by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(
        size: u32,
        mut f: impl FnMut(u32, u32) -> [u8; 3],
    ) -> Result<Self, GeometryError> {
        let mut data = Vec::with_capacity(size as usize * size as usize * 3);
        for y in 0..size {
            for x in 0..size {
                data.extend_from_slice(&f(x, y));
            }
        }
        TileImage::new(size, data)
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn width(&self) -> u32 {
        self.size
    }

    pub fn height(&self) -> u32 {
        self.size
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.size as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn map_pixels(&self, mut f: impl FnMut([u8; 3]) -> [u8; 3]) -> TileImage {
        let mut data = Vec::with_capacity(self.data.len());
        for p in self.pixels() {
            data.extend_from_slice(&f(p));
        }
        TileImage {
            size: self.size,
            data,
        }
    }

    /// Encodes as an 8-bit RGB PNG.
    pub fn to_png(&self) -> Vec<u8> {
        let img = RgbImage::from_raw(self.size, self.size, self.data.clone())
            .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .expect("in-memory PNG encoding cannot fail");
        out.into_inner()
    }

    /// Decodes a PNG, dropping any alpha channel.
    pub fn from_png(bytes: &[u8]) -> Result<Self, GeometryError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| GeometryError::Decode(e.to_string()))?;
        let rgb = img.to_rgb8();
        if rgb.width() != rgb.height() {
            return Err(GeometryError::Shape(format!(
                "tile is {}x{}, expected a square",
                rgb.width(),
                rgb.height()
            )));
        }
        TileImage::new(rgb.width(), rgb.into_raw())
    }
}

/// Assembles a quad of S×S tiles (NW, NE, SW, SE) into a 2S×2S raster and
/// box-averages each 2×2 block back down to S×S.
///
/// Averages round half away from zero, so a block of two 0s and two 255s
/// becomes 128.
pub fn merge_downsample(quad: [&TileImage; 4]) -> Result<TileImage, GeometryError> {
    let size = quad[0].size;
    if let Some(bad) = quad.iter().find(|t| t.size != size) {
        return Err(GeometryError::Shape(format!(
            "quad mixes tile sizes {size} and {}",
            bad.size
        )));
    }
    let s = size as usize;
    let half = s / 2;
    let mut out = vec![0u8; s * s * 3];
    for (q, tile) in quad.iter().enumerate() {
        let (ox, oy) = ((q % 2) * half, (q / 2) * half);
        let src = &tile.data;
        for by in 0..half {
            let row0 = (2 * by) * s;
            let row1 = row0 + s;
            let dst_row = (oy + by) * s + ox;
            for bx in 0..half {
                let p00 = (row0 + 2 * bx) * 3;
                let p01 = p00 + 3;
                let p10 = (row1 + 2 * bx) * 3;
                let p11 = p10 + 3;
                let d = (dst_row + bx) * 3;
                for c in 0..3 {
                    let sum = u16::from(src[p00 + c])
                        + u16::from(src[p01 + c])
                        + u16::from(src[p10 + c])
                        + u16::from(src[p11 + c]);
                    out[d + c] = ((sum + 2) / 4) as u8;
                }
            }
        }
    }
    // 1×1 tiles: the single 2×2 block spans all four quad members.
    if s == 1 {
        let mut sum = [0u16; 3];
        for t in quad {
            for (acc, &v) in sum.iter_mut().zip(&t.data[..3]) {
                *acc += u16::from(v);
            }
        }
        out = sum.iter().map(|v| ((v + 2) / 4) as u8).collect();
    }
    TileImage::new(size, out)
}

/// Several same-zoom tiles placed into one raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mosaic {
    pub origin: TileCoord,
    pub columns: u32,
    pub rows: u32,
    pub tile_size: u32,
    /// RGB raster of `columns * tile_size` by `rows * tile_size` pixels.
    pub raster: Vec<u8>,
}

impl Mosaic {
    pub fn width(&self) -> u32 {
        self.columns * self.tile_size
    }

    pub fn height(&self) -> u32 {
        self.rows * self.tile_size
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width() as usize + x as usize) * 3;
        [self.raster[i], self.raster[i + 1], self.raster[i + 2]]
    }

    /// Cuts the raster back into its constituent tiles.
    pub fn slice(&self) -> BTreeMap<TileCoord, TileImage> {
        let s = self.tile_size as usize;
        let width = self.width() as usize;
        let mut tiles = BTreeMap::new();
        for row in 0..self.rows {
            for col in 0..self.columns {
                let mut data = Vec::with_capacity(s * s * 3);
                for py in 0..s {
                    let start = ((row as usize * s + py) * width + col as usize * s) * 3;
                    data.extend_from_slice(&self.raster[start..start + s * 3]);
                }
                let coord = TileCoord {
                    zoom: self.origin.zoom,
                    x: self.origin.x + col,
                    y: self.origin.y + row,
                };
                tiles.insert(
                    coord,
                    TileImage {
                        size: self.tile_size,
                        data,
                    },
                );
            }
        }
        tiles
    }

    pub fn to_png(&self) -> Vec<u8> {
        let img = RgbImage::from_raw(self.width(), self.height(), self.raster.clone())
            .expect("raster sized from columns and rows");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .expect("in-memory PNG encoding cannot fail");
        out.into_inner()
    }
}

/// Places a dense rectangle of same-zoom tiles into a single raster.
pub fn mosaic(tiles: &BTreeMap<TileCoord, TileImage>) -> Result<Mosaic, GeometryError> {
    let first = tiles
        .keys()
        .next()
        .ok_or_else(|| GeometryError::Shape("mosaic of zero tiles".into()))?;
    let zoom = first.zoom;
    let size = tiles.values().next().map(|t| t.size).unwrap_or(0);
    let (mut x_min, mut x_max, mut y_min, mut y_max) = (u32::MAX, 0, u32::MAX, 0);
    for (c, t) in tiles {
        if c.zoom != zoom {
            return Err(GeometryError::Shape(format!(
                "mosaic mixes zooms {zoom} and {}",
                c.zoom
            )));
        }
        if t.size != size {
            return Err(GeometryError::Shape(format!(
                "mosaic mixes tile sizes {size} and {}",
                t.size
            )));
        }
        x_min = x_min.min(c.x);
        x_max = x_max.max(c.x);
        y_min = y_min.min(c.y);
        y_max = y_max.max(c.y);
    }
    let present: BTreeSet<_> = tiles.keys().copied().collect();
    let missing: Vec<TileCoord> = (y_min..=y_max)
        .flat_map(|y| (x_min..=x_max).map(move |x| TileCoord { zoom, x, y }))
        .filter(|c| !present.contains(c))
        .collect();
    if !missing.is_empty() {
        return Err(GeometryError::Incomplete(missing));
    }

    let columns = x_max - x_min + 1;
    let rows = y_max - y_min + 1;
    let s = size as usize;
    let width = columns as usize * s;
    let mut raster = vec![0u8; width * rows as usize * s * 3];
    for (c, t) in tiles {
        let ox = (c.x - x_min) as usize * s;
        let oy = (c.y - y_min) as usize * s;
        for py in 0..s {
            let dst = ((oy + py) * width + ox) * 3;
            let src = py * s * 3;
            raster[dst..dst + s * 3].copy_from_slice(&t.data[src..src + s * 3]);
        }
    }
    Ok(Mosaic {
        origin: TileCoord {
            zoom,
            x: x_min,
            y: y_min,
        },
        columns,
        rows,
        tile_size: size,
        raster,
    })
}

/// Groups a level by parent coordinate, returning complete quads (children in
/// NW, NE, SW, SE order) and the parents whose quads are missing children.
pub fn group_quads(
    coords: impl IntoIterator<Item = TileCoord>,
) -> (BTreeMap<TileCoord, [TileCoord; 4]>, Vec<TileCoord>) {
    let mut seen: BTreeMap<TileCoord, [bool; 4]> = BTreeMap::new();
    for c in coords {
        if let Ok(p) = c.parent() {
            seen.entry(p).or_default()[c.quadrant()] = true;
        }
    }
    let mut complete = BTreeMap::new();
    let mut incomplete = Vec::new();
    for (parent, flags) in seen {
        if flags.iter().all(|f| *f) {
            complete.insert(parent, parent.children().expect("parent of a valid child"));
        } else {
            incomplete.push(parent);
        }
    }
    (complete, incomplete)
}
