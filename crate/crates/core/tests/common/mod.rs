#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use mapseries::analytics::GrayImage;
use mapseries::corpus::{
    write_tile, CorpusError, FsTileReader, Manifest, ManifestEntry, Split, TileKind, TileReader,
    MANIFEST_FILE,
};
use mapseries::generators::Palette;
use mapseries::strategies::Level;
use mapseries::{merge_downsample, mosaic, Mosaic, TileCoord, TileImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tile(rng: &mut impl Rng, size: u32) -> TileImage {
    TileImage::from_fn(size, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
}

pub fn random_gray(rng: &mut impl Rng, w: usize, h: usize) -> GrayImage {
    GrayImage::new(
        w,
        h,
        (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect(),
    )
    .unwrap()
}

/// Random normalized histogram with `bins` bins, some of them empty.
pub fn random_histogram(rng: &mut impl Rng, bins: usize) -> Vec<f64> {
    let mut h: Vec<f64> = (0..bins)
        .map(|_| {
            if rng.random_bool(0.25) {
                0.0
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    if h.iter().all(|v| *v == 0.0) {
        h[rng.random_range(0..bins)] = 1.0;
    }
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

/// Optimal transport cost between two histograms with ground distance
/// `|i - j| / 255`, solved as a min-cost flow by successive shortest paths.
pub fn transport_lp(h1: &[f64], h2: &[f64]) -> f64 {
    let n = h1.len();
    let src = 2 * n;
    let dst = 2 * n + 1;
    let nodes = 2 * n + 2;
    // (to, capacity, cost, reverse index)
    let mut graph: Vec<Vec<(usize, f64, f64, usize)>> = vec![Vec::new(); nodes];
    let add =
        |g: &mut Vec<Vec<(usize, f64, f64, usize)>>, a: usize, b: usize, cap: f64, cost: f64| {
            let ra = g[b].len();
            let rb = g[a].len();
            g[a].push((b, cap, cost, ra));
            g[b].push((a, 0.0, -cost, rb));
        };
    for i in 0..n {
        add(&mut graph, src, i, h1[i], 0.0);
        add(&mut graph, n + i, dst, h2[i], 0.0);
        for j in 0..n {
            add(
                &mut graph,
                i,
                n + j,
                f64::INFINITY,
                (i as f64 - j as f64).abs() / 255.0,
            );
        }
    }
    let eps = 1e-15;
    let mut total = 0.0;
    loop {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; nodes];
        dist[src] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for u in 0..nodes {
                if dist[u].is_infinite() {
                    continue;
                }
                for (k, &(v, cap, cost, _)) in graph[u].iter().enumerate() {
                    if cap > eps && dist[u] + cost < dist[v] - 1e-18 {
                        dist[v] = dist[u] + cost;
                        prev[v] = Some((u, k));
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[dst].is_infinite() {
            break;
        }
        let mut push = f64::INFINITY;
        let mut v = dst;
        while let Some((u, k)) = prev[v] {
            push = push.min(graph[u][k].1);
            v = u;
        }
        let mut v = dst;
        while let Some((u, k)) = prev[v] {
            graph[u][k].1 -= push;
            let (to, rev) = (graph[u][k].0, graph[u][k].3);
            graph[to][rev].1 += push;
            total += push * graph[u][k].2;
            v = u;
        }
    }
    total
}

/// Mean SSIM computed window by window with explicit 2-D Gaussian weights.
pub fn ssim_reference(a: &GrayImage, b: &GrayImage) -> f64 {
    let r = 5i64;
    let sigma = 1.5f64;
    let mut w = [[0.0f64; 11]; 11];
    let mut wsum = 0.0;
    for (dy, row) in w.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (ox, oy) = (dx as f64 - 5.0, dy as f64 - 5.0);
            *v = (-(ox * ox + oy * oy) / (2.0 * sigma * sigma)).exp();
            wsum += *v;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let (width, height) = (a.width as i64, a.height as i64);
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in r..height - r {
        for cx in r..width - r {
            let at = |img: &GrayImage, dx: usize, dy: usize| {
                img.at((cx - r) as usize + dx, (cy - r) as usize + dy)
            };
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let k = w[dy][dx] / wsum;
                    ma += k * at(a, dx, dy);
                    mb += k * at(b, dx, dy);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let k = w[dy][dx] / wsum;
                    let (da, db) = (at(a, dx, dy) - ma, at(b, dx, dy) - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Sobel magnitude with explicit kernels and edge replication.
pub fn sobel_reference(img: &GrayImage) -> GrayImage {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let (w, h) = (img.width as i64, img.height as i64);
    let mut out = Vec::with_capacity(img.data.len());
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for ky in 0..3 {
                for kx in 0..3 {
                    let sx = (x + kx as i64 - 1).clamp(0, w - 1) as usize;
                    let sy = (y + ky as i64 - 1).clamp(0, h - 1) as usize;
                    let v = img.at(sx, sy);
                    gx += KX[ky][kx] * v;
                    gy += KY[ky][kx] * v;
                }
            }
            out.push((gx * gx + gy * gy).sqrt().min(255.0));
        }
    }
    GrayImage::new(img.width, img.height, out).unwrap()
}

pub fn luma_reference(t: &TileImage) -> GrayImage {
    let mut data = Vec::new();
    for y in 0..t.height() {
        for x in 0..t.width() {
            let [r, g, b] = t.pixel(x, y);
            data.push(0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64);
        }
    }
    GrayImage::new(t.width() as usize, t.height() as usize, data).unwrap()
}

/// Halves a whole mosaic with the `(sum + 2) / 4` box filter.
pub fn downsample_mosaic(m: &Mosaic) -> Mosaic {
    let (w, h) = (m.width(), m.height());
    let (ow, oh) = (w / 2, h / 2);
    let mut raster = vec![0u8; (ow * oh * 3) as usize];
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..3 {
                let sum: u32 = [(0, 0), (1, 0), (0, 1), (1, 1)]
                    .iter()
                    .map(|(dx, dy)| {
                        let (sx, sy) = (2 * x + dx, 2 * y + dy);
                        m.raster[((sy * w + sx) * 3 + c) as usize] as u32
                    })
                    .sum();
                raster[((y * ow + x) * 3 + c) as usize] = ((sum + 2) / 4) as u8;
            }
        }
    }
    Mosaic {
        origin: m.origin.parent().unwrap(),
        columns: m.columns / 2,
        rows: m.rows / 2,
        tile_size: m.tile_size,
        raster,
    }
}

/// Levels below `top` derived by downsampling the whole mosaic, never
/// touching individual quads.
pub fn pyramid_oracle(top: &Level, steps: usize) -> BTreeMap<u8, Level> {
    let mut out = BTreeMap::new();
    let mut m = mosaic(top).unwrap();
    let mut zoom = top.keys().next().unwrap().zoom;
    out.insert(zoom, top.clone());
    for _ in 0..steps {
        m = downsample_mosaic(&m);
        zoom -= 1;
        out.insert(zoom, m.slice());
    }
    out
}

/// Merges quads level by level with the library routine.
pub fn merged_pyramid(top: &Level, steps: usize) -> BTreeMap<u8, Level> {
    let mut out = BTreeMap::new();
    let mut cur = top.clone();
    let mut zoom = top.keys().next().unwrap().zoom;
    out.insert(zoom, cur.clone());
    for _ in 0..steps {
        let mut next = Level::new();
        for c in cur.keys() {
            let p = c.parent().unwrap();
            if next.contains_key(&p) {
                continue;
            }
            let kids = p.children().unwrap();
            next.insert(p, merge_downsample(kids.map(|k| &cur[&k])).unwrap());
        }
        zoom -= 1;
        out.insert(zoom, next.clone());
        cur = next;
    }
    out
}

pub fn test_palette() -> Palette {
    Palette::standard()
}

/// Palette color of the map cell at (`cx`, `cy`).
fn truth_color(p: &Palette, cx: u32, cy: u32) -> [u8; 3] {
    let class = if cx % 24 < 3 || cy % 40 < 4 {
        "road"
    } else if (cx / 8 + cy / 8).is_multiple_of(4) {
        "water"
    } else if (cx / 11 * 7 + cy / 13 * 3).is_multiple_of(9) {
        "vegetation"
    } else {
        "background"
    };
    let idx = p.entries().iter().position(|e| e.class == class).unwrap();
    p.color(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsiStyle {
    /// Uniform RGB noise.
    Noise,
    /// The true map plus a little per-channel jitter.
    NearMap,
}

pub struct SynthCorpus {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub truth: BTreeMap<u8, Level>,
    pub rsi: BTreeMap<u8, Level>,
    pub palette: Palette,
}

/// A dense `side × side` block of top-zoom tiles for one test city, with
/// rsi and map tiles at every zoom from `top` down to `bottom`. Maps below
/// the top are merged from the top-zoom maps.
#[allow(clippy::too_many_arguments)]
pub fn synth_corpus(
    root: &Path,
    city: &str,
    top: u8,
    bottom: u8,
    side: u32,
    tile_size: u32,
    style: RsiStyle,
    seed: u64,
) -> SynthCorpus {
    let cell = 1u32 << (top - bottom);
    synth_corpus_cells(root, city, top, bottom, side, tile_size, style, seed, cell)
}

/// Like [`synth_corpus`] with an explicit map cell width in top-zoom pixels.
/// Cells narrower than `2^(top - bottom)` blur into mixed colors at the
/// bottom zooms.
#[allow(clippy::too_many_arguments)]
pub fn synth_corpus_cells(
    root: &Path,
    city: &str,
    top: u8,
    bottom: u8,
    side: u32,
    tile_size: u32,
    style: RsiStyle,
    seed: u64,
    cell: u32,
) -> SynthCorpus {
    let palette = test_palette();
    let steps = (top - bottom) as usize;
    let align = 1u32 << steps;
    assert_eq!(
        side % align,
        0,
        "side must allow complete quads down to the bottom zoom"
    );
    let (x0, y0) = (1454 * 16, 806 * 16);
    let mut top_level = Level::new();
    for ty in 0..side {
        for tx in 0..side {
            let c = TileCoord::new(top, x0 + tx, y0 + ty).unwrap();
            let tile = TileImage::from_fn(tile_size, |px, py| {
                truth_color(
                    &palette,
                    (tx * tile_size + px) / cell,
                    (ty * tile_size + py) / cell,
                )
            })
            .unwrap();
            top_level.insert(c, tile);
        }
    }
    let truth = merged_pyramid(&top_level, steps);
    let mut r = rng(seed);
    let mut rsi = BTreeMap::new();
    for (z, level) in &truth {
        let mut out = Level::new();
        for (c, t) in level {
            let tile = match style {
                RsiStyle::Noise => random_tile(&mut r, tile_size),
                RsiStyle::NearMap => t.map_pixels(|px| {
                    px.map(|v| (v as i32 + r.random_range(-3..=3)).clamp(0, 255) as u8)
                }),
            };
            out.insert(*c, tile);
        }
        rsi.insert(*z, out);
    }
    let mut entries = Vec::new();
    for (kind, levels) in [(TileKind::Map, &truth), (TileKind::Rsi, &rsi)] {
        for level in levels.values() {
            for (c, t) in level {
                entries.push(write_tile(root, city, kind, *c, Split::Test, t).unwrap());
            }
        }
    }
    let manifest = Manifest::new(entries);
    manifest.write(&root.join(MANIFEST_FILE)).unwrap();
    SynthCorpus {
        root: root.to_path_buf(),
        manifest,
        truth,
        rsi,
        palette,
    }
}

/// Records every tile a pipeline reads.
pub struct LoggingReader {
    pub inner: FsTileReader,
    pub log: Mutex<Vec<(TileKind, TileCoord)>>,
}

impl LoggingReader {
    pub fn new(root: &Path) -> Self {
        LoggingReader {
            inner: FsTileReader::new(root),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn reads(&self) -> Vec<(TileKind, TileCoord)> {
        let mut v = self.log.lock().unwrap().clone();
        v.sort();
        v
    }
}

impl TileReader for LoggingReader {
    fn read(&self, entry: &ManifestEntry) -> Result<TileImage, CorpusError> {
        self.log.lock().unwrap().push((entry.kind, entry.coord));
        self.inner.read(entry)
    }
}

pub fn echo_plugin() -> String {
    env!("CARGO_BIN_EXE_mapseries-echo-plugin").to_string()
}

pub fn plugin_command(mode: &str) -> Vec<String> {
    vec![echo_plugin(), mode.to_string()]
}

/// Per-zoom values of the reference study's strategy comparison table:
/// (zoom, series [ssim, essi, road, water], parallel [...]). Zoom 17 is
/// shared by both strategies.
pub const TABLE2: [(u8, [f64; 4], [f64; 4]); 5] = [
    (
        17,
        [0.6164, 0.0573, 0.3244, 0.2200],
        [0.6164, 0.0573, 0.3244, 0.2200],
    ),
    (
        16,
        [0.6731, 0.1488, 0.3329, 0.2347],
        [0.5821, 0.1142, 0.2162, 0.2125],
    ),
    (
        15,
        [0.5720, 0.1438, 0.3319, 0.2999],
        [0.5884, 0.1046, 0.1836, 0.2058],
    ),
    (
        14,
        [0.4605, 0.1056, 0.3132, 0.3812],
        [0.4037, 0.0802, 0.1732, 0.1507],
    ),
    (
        13,
        [0.4941, 0.1778, 0.1732, 0.4745],
        [0.4123, 0.08245, 0.1632, 0.2633],
    ),
];

pub fn table2_rows() -> Vec<mapseries::analytics::MetricRow> {
    use mapseries::analytics::MetricRow;
    use mapseries::strategies::StrategyKind;
    let row = |zoom, strategy, v: [f64; 4]| MetricRow {
        zoom,
        strategy,
        ssim: Some(v[0]),
        essi: Some(v[1]),
        iou_road: Some(v[2]),
        iou_water: Some(v[3]),
    };
    TABLE2
        .iter()
        .flat_map(|&(z, s, p)| {
            [
                row(z, StrategyKind::Series, s),
                row(z, StrategyKind::Parallel, p),
            ]
        })
        .collect()
}
