use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Manifest, ManifestEntry, TileKind};
use crate::tile::{group_quads, merge_downsample, TileCoord, TileImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PairKind {
    /// Remote-sensing tile and the real map tile at the same zoom.
    Rm,
    /// Merged generated quad at zoom `n` and the real map tile at `n - 1`.
    Mm,
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairKind::Rm => "RM",
            PairKind::Mm => "MM",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairInput {
    Entry(ManifestEntry),
    /// Four generated children merged into the footprint of `coord`.
    Merged {
        coord: TileCoord,
        image: TileImage,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub kind: PairKind,
    pub input: PairInput,
    pub target: ManifestEntry,
    pub input_zoom: u8,
    pub target_zoom: u8,
}

impl PairSample {
    /// RM pairs share a zoom; MM pairs step down exactly one zoom.
    pub fn is_consistent(&self) -> bool {
        if self.target.kind != TileKind::Map || self.target.coord.zoom != self.target_zoom {
            return false;
        }
        match (&self.kind, &self.input) {
            (PairKind::Rm, PairInput::Entry(e)) => {
                e.kind == TileKind::Rsi
                    && self.input_zoom == self.target_zoom
                    && e.coord == self.target.coord
            }
            (PairKind::Mm, PairInput::Merged { coord, .. }) => {
                self.input_zoom == self.target_zoom + 1 && *coord == self.target.coord
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RmPairing {
    pub pairs: Vec<PairSample>,
    /// Tiles at the zoom with no counterpart of the other kind.
    pub unpaired: Vec<ManifestEntry>,
}

/// Pairs every rsi tile with the map tile of the same city and coordinate.
pub fn build_rm_pairs(m: &Manifest, zoom: u8) -> RmPairing {
    let mut rsi: BTreeMap<(&str, TileCoord), &ManifestEntry> = BTreeMap::new();
    let mut map: BTreeMap<(&str, TileCoord), &ManifestEntry> = BTreeMap::new();
    for e in m.entries().iter().filter(|e| e.coord.zoom == zoom) {
        let slot = match e.kind {
            TileKind::Rsi => &mut rsi,
            TileKind::Map => &mut map,
        };
        slot.insert((e.city.as_str(), e.coord), e);
    }
    let mut out = RmPairing::default();
    for (key, r) in &rsi {
        match map.get(key) {
            Some(t) => out.pairs.push(PairSample {
                kind: PairKind::Rm,
                input: PairInput::Entry((*r).clone()),
                target: (*t).clone(),
                input_zoom: zoom,
                target_zoom: zoom,
            }),
            None => out.unpaired.push((*r).clone()),
        }
    }
    out.unpaired.extend(
        map.iter()
            .filter(|(k, _)| !rsi.contains_key(k))
            .map(|(_, e)| (*e).clone()),
    );
    out.unpaired.sort();
    out
}

#[derive(Debug, Clone, Default)]
pub struct MmPairing {
    pub pairs: Vec<PairSample>,
    /// Zoom `n - 1` parents whose generated quads are missing children.
    pub incomplete: Vec<TileCoord>,
    /// Complete quads without a real map tile at the parent coordinate.
    pub missing_targets: Vec<TileCoord>,
}

/// Pairs merged quads of generated zoom-`zoom` tiles with real maps one zoom
/// up the pyramid.
pub fn build_mm_pairs(
    generated: &BTreeMap<TileCoord, TileImage>,
    m: &Manifest,
    zoom: u8,
) -> Result<MmPairing, CorpusError> {
    let target_zoom = zoom.saturating_sub(1);
    let mut maps: BTreeMap<TileCoord, &ManifestEntry> = BTreeMap::new();
    for e in m.select(TileKind::Map, target_zoom, None) {
        maps.entry(e.coord).or_insert(e);
    }
    let (complete, incomplete) = group_quads(
        generated
            .keys()
            .copied()
            .filter(|c| c.zoom == zoom && zoom > 0),
    );
    let mut out = MmPairing {
        incomplete,
        ..Default::default()
    };
    for (parent, kids) in complete {
        let Some(target) = maps.get(&parent) else {
            out.missing_targets.push(parent);
            continue;
        };
        let image = merge_downsample(kids.map(|k| &generated[&k]))?;
        out.pairs.push(PairSample {
            kind: PairKind::Mm,
            input: PairInput::Merged {
                coord: parent,
                image,
            },
            target: (*target).clone(),
            input_zoom: zoom,
            target_zoom,
        });
    }
    Ok(out)
}

/// Writes merged MM inputs under `out_dir/mm/{zoom}/{x}/{y}.png` and a
/// `pairs.tsv` listing (kind, input zoom, target zoom, input path, target path).
pub fn materialize_pairs(
    pairs: &[PairSample],
    corpus_root: &Path,
    out_dir: &Path,
) -> Result<usize, CorpusError> {
    fs::create_dir_all(out_dir).map_err(|e| CorpusError::io(out_dir, e))?;
    let mut lines = String::from("#kind\tinput_zoom\ttarget_zoom\tinput\ttarget\n");
    let mut written = BTreeSet::new();
    for p in pairs {
        let input = match &p.input {
            PairInput::Entry(e) => e.file_path(corpus_root),
            PairInput::Merged { coord, image } => {
                let path = out_dir
                    .join("mm")
                    .join(coord.zoom.to_string())
                    .join(coord.x.to_string())
                    .join(format!("{}.png", coord.y));
                if written.insert(path.clone()) {
                    if let Some(dir) = path.parent() {
                        fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
                    }
                    fs::write(&path, image.to_png()).map_err(|e| CorpusError::io(&path, e))?;
                }
                path
            }
        };
        lines.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            p.kind,
            p.input_zoom,
            p.target_zoom,
            input.display(),
            p.target.file_path(corpus_root).display()
        ));
    }
    let list = out_dir.join("pairs.tsv");
    fs::write(&list, lines).map_err(|e| CorpusError::io(&list, e))?;
    Ok(pairs.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;

    fn entry(kind: TileKind, z: u8, x: u32, y: u32) -> ManifestEntry {
        let coord = TileCoord::new(z, x, y).unwrap();
        ManifestEntry {
            city: "tokyo".into(),
            kind,
            coord,
            split: Split::Test,
            checksum: String::new(),
            path: ManifestEntry::layout_path(kind, coord),
        }
    }

    #[test]
    fn rm_pairs_match_coords() {
        let m = Manifest::new(vec![
            entry(TileKind::Rsi, 17, 0, 0),
            entry(TileKind::Rsi, 17, 1, 0),
            entry(TileKind::Map, 17, 0, 0),
            entry(TileKind::Map, 17, 1, 0),
        ]);
        let out = build_rm_pairs(&m, 17);
        assert_eq!(out.pairs.len(), 2);
        assert!(out.unpaired.is_empty());
        assert!(out.pairs.iter().all(PairSample::is_consistent));
    }

    #[test]
    fn rm_reports_unpaired() {
        let m = Manifest::new(vec![entry(TileKind::Rsi, 17, 0, 0)]);
        let out = build_rm_pairs(&m, 17);
        assert!(out.pairs.is_empty());
        assert_eq!(out.unpaired.len(), 1);
    }

    #[test]
    fn mm_pair_input_is_merged_quad() {
        let parent = TileCoord::new(16, 3, 4).unwrap();
        let generated: BTreeMap<_, _> = parent
            .children()
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, TileImage::filled(4, [i as u8 * 40, 0, 0]).unwrap()))
            .collect();
        let m = Manifest::new(vec![entry(TileKind::Map, 16, 3, 4)]);
        let out = build_mm_pairs(&generated, &m, 17).unwrap();
        assert_eq!(out.pairs.len(), 1);
        let kids = parent.children().unwrap().map(|k| &generated[&k]);
        let expected = merge_downsample(kids).unwrap();
        match &out.pairs[0].input {
            PairInput::Merged { image, coord } => {
                assert_eq!(image, &expected);
                assert_eq!(*coord, parent);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(out.pairs[0].is_consistent());
    }

    #[test]
    fn mm_incomplete_quad_reported() {
        let parent = TileCoord::new(16, 3, 4).unwrap();
        let generated: BTreeMap<_, _> = parent.children().unwrap()[..3]
            .iter()
            .map(|c| (*c, TileImage::filled(4, [0, 0, 0]).unwrap()))
            .collect();
        let m = Manifest::new(vec![entry(TileKind::Map, 16, 3, 4)]);
        let out = build_mm_pairs(&generated, &m, 17).unwrap();
        assert!(out.pairs.is_empty());
        assert_eq!(out.incomplete, vec![parent]);
    }
}
