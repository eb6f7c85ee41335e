use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use super::CorpusError;
use crate::tile::{TileCoord, TileImage};

/// Default name of the manifest file inside a corpus root.
pub const MANIFEST_FILE: &str = "manifest.tsv";

const HEADER: &str = "#city\tkind\tzoom\tx\ty\tsplit\tchecksum\tpath";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileKind {
    Rsi,
    Map,
}

impl TileKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TileKind::Rsi => "rsi",
            TileKind::Map => "map",
        }
    }
}

impl fmt::Display for TileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TileKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rsi" => Ok(TileKind::Rsi),
            "map" => Ok(TileKind::Map),
            other => Err(format!("unknown tile kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Assigns splits by city name. Cities not listed as test cities train.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPolicy {
    pub test_cities: BTreeSet<String>,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy {
            test_cities: ["mexico_city", "tokyo"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl SplitPolicy {
    /// `"*"` in the test list marks every city as test.
    pub fn all_test() -> Self {
        SplitPolicy {
            test_cities: BTreeSet::from(["*".to_string()]),
        }
    }

    pub fn split_for(&self, city: &str) -> Split {
        if self.test_cities.contains(city) || self.test_cities.contains("*") {
            Split::Test
        } else {
            Split::Train
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub city: String,
    pub kind: TileKind,
    pub coord: TileCoord,
    pub split: Split,
    /// Lowercase hex SHA-256 of the file bytes.
    pub checksum: String,
    /// Relative to the city directory: `{kind}/{zoom}/{x}/{y}.png`.
    pub path: String,
}

impl ManifestEntry {
    pub fn layout_path(kind: TileKind, coord: TileCoord) -> String {
        format!("{}/{}/{}/{}.png", kind, coord.zoom, coord.x, coord.y)
    }

    pub fn file_path(&self, root: &Path) -> PathBuf {
        root.join(&self.city).join(&self.path)
    }

    fn sort_key(&self) -> (&str, TileKind, u8, u32, u32) {
        (
            &self.city,
            self.kind,
            self.coord.zoom,
            self.coord.x,
            self.coord.y,
        )
    }
}

/// All tiles of a corpus, in canonical (city, kind, zoom, x, y) order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(mut entries: Vec<ManifestEntry>) -> Self {
        entries.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        entries.dedup_by(|a, b| a.sort_key() == b.sort_key());
        Manifest { entries }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn select(
        &self,
        kind: TileKind,
        zoom: u8,
        split: Option<Split>,
    ) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| {
            e.kind == kind && e.coord.zoom == zoom && split.is_none_or(|s| e.split == s)
        })
    }

    pub fn find(&self, kind: TileKind, coord: TileCoord) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.kind == kind && e.coord == coord)
    }

    /// Union of both manifests; entries of `other` win on conflicts.
    pub fn merge(&self, other: &Manifest) -> Manifest {
        let mut all = other.entries.clone();
        all.extend(self.entries.iter().cloned());
        Manifest::new(all)
    }

    /// Canonical text form: a header line, then one tab-separated record per
    /// entry with fields city, kind, zoom, x, y, split, checksum, path.
    pub fn to_text(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.city, e.kind, e.coord.zoom, e.coord.x, e.coord.y, e.split, e.checksum, e.path
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Manifest, CorpusError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: String| CorpusError::Manifest {
                line: n + 1,
                reason: why,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 8 {
                return Err(bad(format!("expected 8 fields, found {}", fields.len())));
            }
            let num = |s: &str| s.parse::<u32>().map_err(|e| bad(format!("{s:?}: {e}")));
            let zoom = u8::try_from(num(fields[2])?).map_err(|e| bad(e.to_string()))?;
            let coord = TileCoord::new(zoom, num(fields[3])?, num(fields[4])?)
                .map_err(|e| bad(e.to_string()))?;
            entries.push(ManifestEntry {
                city: fields[0].to_string(),
                kind: fields[1].parse().map_err(bad)?,
                coord,
                split: fields[5].parse().map_err(bad)?,
                checksum: fields[6].to_string(),
                path: fields[7].to_string(),
            });
        }
        Ok(Manifest::new(entries))
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_text()).map_err(|e| CorpusError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Manifest, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Manifest::parse(&text)
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Default)]
pub struct IngestOutcome {
    pub manifest: Manifest,
    pub warnings: Vec<String>,
}

/// Walks `{root}/{city}/{kind}/{zoom}/{x}/{y}.png` and builds a manifest.
///
/// Files outside the layout or that fail to decode are skipped with a
/// warning. PNGs that are not 8-bit RGB are rewritten in place as RGB so the
/// recorded checksum always describes an RGB file.
pub fn ingest(root: &Path, splits: &SplitPolicy) -> Result<IngestOutcome, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::io(
            root,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "corpus root is not a directory",
            ),
        ));
    }
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    let walker = WalkDir::new(root)
        .min_depth(1)
        .sort_by_file_name()
        .into_iter();
    for item in walker {
        let item = match item {
            Ok(item) => item,
            Err(e) => {
                warnings.push(format!("walk error: {e}"));
                continue;
            }
        };
        if !item.file_type().is_file() {
            continue;
        }
        // Loose files beside the city directories (manifests, summaries).
        if item.depth() == 1 {
            continue;
        }
        let rel = item.path().strip_prefix(root).unwrap_or(item.path());
        let parsed = match parse_layout(rel) {
            Ok(p) => p,
            Err(why) => {
                warnings.push(format!("{}: {why}", rel.display()));
                continue;
            }
        };
        let bytes = match fs::read(item.path()) {
            Ok(b) => b,
            Err(e) => {
                warnings.push(format!("{}: {e}", rel.display()));
                continue;
            }
        };
        let bytes = match normalize_png(&bytes) {
            Ok(None) => bytes,
            Ok(Some(rgb)) => {
                fs::write(item.path(), &rgb).map_err(|e| CorpusError::io(item.path(), e))?;
                warnings.push(format!("{}: converted to 8-bit RGB", rel.display()));
                rgb
            }
            Err(why) => {
                warnings.push(format!("{}: {why}", rel.display()));
                continue;
            }
        };
        let (city, kind, coord) = parsed;
        entries.push(ManifestEntry {
            split: splits.split_for(&city),
            city,
            kind,
            coord,
            checksum: sha256_hex(&bytes),
            path: ManifestEntry::layout_path(kind, coord),
        });
    }
    Ok(IngestOutcome {
        manifest: Manifest::new(entries),
        warnings,
    })
}

fn parse_layout(rel: &Path) -> Result<(String, TileKind, TileCoord), String> {
    let parts: Vec<&str> = rel
        .components()
        .map(|c| c.as_os_str().to_str().unwrap_or("\u{fffd}"))
        .collect();
    if parts.len() != 5 {
        return Err("not in {city}/{kind}/{zoom}/{x}/{y}.png layout".into());
    }
    let kind: TileKind = parts[1].parse()?;
    let y_str = parts[4]
        .strip_suffix(".png")
        .ok_or_else(|| "tile file must end in .png".to_string())?;
    let zoom: u8 = parts[2]
        .parse()
        .map_err(|_| format!("bad zoom {:?}", parts[2]))?;
    let x: u32 = parts[3]
        .parse()
        .map_err(|_| format!("bad x {:?}", parts[3]))?;
    let y: u32 = y_str.parse().map_err(|_| format!("bad y {y_str:?}"))?;
    let coord = TileCoord::new(zoom, x, y).map_err(|e| e.to_string())?;
    Ok((parts[0].to_string(), kind, coord))
}

/// Returns `Some(re-encoded bytes)` when the PNG is valid but not 8-bit RGB.
pub(crate) fn normalize_png(bytes: &[u8]) -> Result<Option<Vec<u8>>, String> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| format!("undecodable image: {e}"))?;
    if img.width() != img.height() || !img.width().is_power_of_two() {
        return Err(format!(
            "tile is {}x{}, expected a power-of-two square",
            img.width(),
            img.height()
        ));
    }
    if matches!(img, image::DynamicImage::ImageRgb8(_)) {
        return Ok(None);
    }
    let tile = TileImage::new(img.width(), img.to_rgb8().into_raw()).map_err(|e| e.to_string())?;
    Ok(Some(tile.to_png()))
}

/// Source of tile rasters for the strategies. Kept as a trait so tests can
/// observe exactly which corpus tiles a pipeline touches.
pub trait TileReader: Sync {
    fn read(&self, entry: &ManifestEntry) -> Result<TileImage, CorpusError>;
}

/// Reads tiles from a corpus directory on disk.
#[derive(Debug, Clone)]
pub struct FsTileReader {
    pub root: PathBuf,
}

impl FsTileReader {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FsTileReader { root: root.into() }
    }
}

impl TileReader for FsTileReader {
    fn read(&self, entry: &ManifestEntry) -> Result<TileImage, CorpusError> {
        let path = entry.file_path(&self.root);
        let bytes = fs::read(&path).map_err(|e| CorpusError::io(&path, e))?;
        TileImage::from_png(&bytes).map_err(|e| CorpusError::Decode {
            path: path.clone(),
            reason: e.to_string(),
        })
    }
}

/// Writes a tile into the corpus layout and returns its manifest entry.
pub fn write_tile(
    root: &Path,
    city: &str,
    kind: TileKind,
    coord: TileCoord,
    split: Split,
    tile: &TileImage,
) -> Result<ManifestEntry, CorpusError> {
    let path = ManifestEntry::layout_path(kind, coord);
    let full = root.join(city).join(&path);
    if let Some(dir) = full.parent() {
        fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    }
    let bytes = tile.to_png();
    fs::write(&full, &bytes).map_err(|e| CorpusError::io(&full, e))?;
    Ok(ManifestEntry {
        city: city.to_string(),
        kind,
        coord,
        split,
        checksum: sha256_hex(&bytes),
        path,
    })
}
