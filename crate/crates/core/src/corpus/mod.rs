//! Tile corpora on disk: layout, manifests, downloads, training pairs and
//! dataset statistics.

mod fetch;
mod manifest;
mod pairs;
mod stats;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tile::{GeometryError, TileCoord};

pub use fetch::{fetch_tiles, FetchOutcome, FetchRequest, TileRegion, TileSource};
pub use manifest::{
    ingest, sha256_hex, write_tile, FsTileReader, IngestOutcome, Manifest, ManifestEntry, Split,
    SplitPolicy, TileKind, TileReader, MANIFEST_FILE,
};
pub use pairs::{
    build_mm_pairs, build_rm_pairs, materialize_pairs, MmPairing, PairInput, PairKind, PairSample,
    RmPairing,
};
pub use stats::{corpus_stats, CorpusStats};

/// Zoom levels used when nothing else is configured.
pub const DEFAULT_TOP_ZOOM: u8 = 17;
pub const DEFAULT_BOTTOM_ZOOM: u8 = 13;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode tile: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("invalid tile source: {0}")]
    Source(String),
    #[error("failed to fetch {} tile(s): {}", failed.len(), failed.iter().map(|(c, why)| format!("{c} ({why})")).collect::<Vec<_>>().join(", "))]
    Fetch {
        failed: Vec<(TileCoord, String)>,
        fetched: Vec<ManifestEntry>,
    },
    #[error(
        "integrity check failed for {coord}: manifest has {expected}, server returned {actual}"
    )]
    Integrity {
        coord: TileCoord,
        expected: String,
        actual: String,
    },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
