use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use super::{Manifest, Split, TileKind};
use crate::tile::TileCoord;

/// Tile counts per (zoom, kind, split) and RM-capable coordinate counts per
/// (zoom, split).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub tiles: BTreeMap<(u8, TileKind, Split), usize>,
    pub rm_capable: BTreeMap<(u8, Split), usize>,
}

impl CorpusStats {
    pub fn tiles(&self, zoom: u8, kind: TileKind, split: Split) -> usize {
        self.tiles.get(&(zoom, kind, split)).copied().unwrap_or(0)
    }

    pub fn rm_capable(&self, zoom: u8, split: Split) -> usize {
        self.rm_capable.get(&(zoom, split)).copied().unwrap_or(0)
    }

    pub fn zooms(&self) -> BTreeSet<u8> {
        self.tiles.keys().map(|k| k.0).collect()
    }

    /// Plain-text table with one row per zoom, deepest first.
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<6} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "ZOOM", "RM TRAIN", "RM TEST", "RSI TRAIN", "RSI TEST", "MAP TRAIN", "MAP TEST"
        )
        .unwrap();
        for z in self.zooms().into_iter().rev() {
            writeln!(
                out,
                "{:<6} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
                z,
                self.rm_capable(z, Split::Train),
                self.rm_capable(z, Split::Test),
                self.tiles(z, TileKind::Rsi, Split::Train),
                self.tiles(z, TileKind::Rsi, Split::Test),
                self.tiles(z, TileKind::Map, Split::Train),
                self.tiles(z, TileKind::Map, Split::Test),
            )
            .unwrap();
        }
        out
    }
}

pub fn corpus_stats(m: &Manifest) -> CorpusStats {
    let mut stats = CorpusStats::default();
    let mut seen: BTreeMap<(&str, TileCoord), (Split, [bool; 2])> = BTreeMap::new();
    for e in m.entries() {
        *stats
            .tiles
            .entry((e.coord.zoom, e.kind, e.split))
            .or_default() += 1;
        let slot = seen
            .entry((e.city.as_str(), e.coord))
            .or_insert((e.split, [false; 2]));
        slot.1[(e.kind == TileKind::Map) as usize] = true;
    }
    for ((_, coord), (split, kinds)) in seen {
        if kinds[0] && kinds[1] {
            *stats.rm_capable.entry((coord.zoom, split)).or_default() += 1;
        }
    }
    stats
}
