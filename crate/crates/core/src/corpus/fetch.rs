use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::manifest::{normalize_png, sha256_hex};
use super::{CorpusError, Manifest, ManifestEntry, Split, TileKind};
use crate::tile::TileCoord;

/// An XYZ tile endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSource {
    /// URL with `{z}`, `{x}` and `{y}` placeholders.
    pub url_template: String,
    /// Maximum requests per second.
    pub rate: f64,
    /// Extra attempts per tile after the first failure.
    pub retries: u32,
    #[serde(default = "default_user_agent")]
    pub user_agent: String,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_user_agent() -> String {
    concat!("mapseries/", env!("CARGO_PKG_VERSION")).to_string()
}

fn default_backoff_ms() -> u64 {
    250
}

impl TileSource {
    pub fn new(url_template: impl Into<String>, rate: f64, retries: u32) -> Self {
        TileSource {
            url_template: url_template.into(),
            rate,
            retries,
            user_agent: default_user_agent(),
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for ph in ["{z}", "{x}", "{y}"] {
            if !self.url_template.contains(ph) {
                return Err(CorpusError::Source(format!(
                    "url template {:?} lacks {ph}",
                    self.url_template
                )));
            }
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(CorpusError::Source(format!(
                "request rate must be positive, got {}",
                self.rate
            )));
        }
        Ok(())
    }

    pub fn url(&self, c: TileCoord) -> String {
        self.url_template
            .replace("{z}", &c.zoom.to_string())
            .replace("{x}", &c.x.to_string())
            .replace("{y}", &c.y.to_string())
    }
}

/// Inclusive rectangle of tiles at one zoom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRegion {
    pub zoom: u8,
    pub x_min: u32,
    pub x_max: u32,
    pub y_min: u32,
    pub y_max: u32,
}

impl TileRegion {
    /// Tiles at `zoom` covering the same footprint, row-major.
    pub fn covering(&self, zoom: u8) -> Vec<TileCoord> {
        let (x0, x1, y0, y1) = if zoom <= self.zoom {
            let s = self.zoom - zoom;
            (
                self.x_min >> s,
                self.x_max >> s,
                self.y_min >> s,
                self.y_max >> s,
            )
        } else {
            let s = zoom - self.zoom;
            let k = 1u32 << s;
            (
                self.x_min << s,
                (self.x_max << s) + k - 1,
                self.y_min << s,
                (self.y_max << s) + k - 1,
            )
        };
        (y0..=y1)
            .flat_map(|y| (x0..=x1).map(move |x| TileCoord { zoom, x, y }))
            .collect()
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(CorpusError::Source("empty tile region".into()));
        }
        TileCoord::new(self.zoom, self.x_max, self.y_max)
            .map_err(|e| CorpusError::Source(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FetchRequest {
    pub city: String,
    pub kind: TileKind,
    pub split: Split,
    pub region: TileRegion,
    pub zooms: RangeInclusive<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct FetchOutcome {
    /// Entries for every requested tile, downloaded or already present.
    pub manifest: Manifest,
    pub downloaded: usize,
}

/// Downloads every tile covering `req.region` at each zoom in `req.zooms`
/// into `{root}/{city}/{kind}/{z}/{x}/{y}.png`.
///
/// Files already on disk are kept when their checksum agrees with `known`
/// (or, absent a known entry, when they decode as RGB tiles). Requests are
/// spaced to honor `src.rate`.
pub fn fetch_tiles(
    src: &TileSource,
    req: &FetchRequest,
    root: &Path,
    known: &Manifest,
) -> Result<FetchOutcome, CorpusError> {
    src.validate()?;
    req.region.validate()?;
    if req.zooms.is_empty() {
        return Err(CorpusError::Source("empty zoom range".into()));
    }

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(60)))
        .http_status_as_error(true)
        .build()
        .into();
    let interval = Duration::from_secs_f64(1.0 / src.rate);
    let mut last_request: Option<Instant> = None;

    let mut entries = Vec::new();
    let mut failed = Vec::new();
    let mut downloaded = 0;

    for zoom in req.zooms.clone().rev() {
        for coord in req.region.covering(zoom) {
            let rel = ManifestEntry::layout_path(req.kind, coord);
            let full = root.join(&req.city).join(&rel);
            let prior = known
                .entries()
                .iter()
                .find(|e| e.city == req.city && e.kind == req.kind && e.coord == coord);

            if let Ok(bytes) = fs::read(&full) {
                let sum = sha256_hex(&bytes);
                let verified = match prior {
                    Some(p) => p.checksum == sum,
                    None => matches!(normalize_png(&bytes), Ok(None)),
                };
                if verified {
                    entries.push(ManifestEntry {
                        city: req.city.clone(),
                        kind: req.kind,
                        coord,
                        split: req.split,
                        checksum: sum,
                        path: rel,
                    });
                    continue;
                }
                debug!("{} fails verification, re-fetching", full.display());
            }

            let url = src.url(coord);
            let mut attempt = 0;
            let body = loop {
                if let Some(t) = last_request {
                    let since = t.elapsed();
                    if since < interval {
                        thread::sleep(interval - since);
                    }
                }
                last_request = Some(Instant::now());
                let result = agent
                    .get(&url)
                    .header("User-Agent", &src.user_agent)
                    .call()
                    .and_then(|mut resp| resp.body_mut().read_to_vec());
                match result
                    .map_err(|e| e.to_string())
                    .and_then(|b| match normalize_png(&b) {
                        Ok(None) => Ok(b),
                        Ok(Some(rgb)) => Ok(rgb),
                        Err(why) => Err(why),
                    }) {
                    Ok(b) => break Ok(b),
                    Err(why) if attempt < src.retries => {
                        warn!("{url}: {why} (attempt {})", attempt + 1);
                        attempt += 1;
                        thread::sleep(Duration::from_millis(src.backoff_ms * u64::from(attempt)));
                    }
                    Err(why) => break Err(why),
                }
            };
            let body = match body {
                Ok(b) => b,
                Err(why) => {
                    failed.push((coord, why));
                    continue;
                }
            };
            let sum = sha256_hex(&body);
            if let Some(p) = prior {
                if p.checksum != sum {
                    return Err(CorpusError::Integrity {
                        coord,
                        expected: p.checksum.clone(),
                        actual: sum,
                    });
                }
            }
            if let Some(dir) = full.parent() {
                fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
            }
            fs::write(&full, &body).map_err(|e| CorpusError::io(&full, e))?;
            downloaded += 1;
            entries.push(ManifestEntry {
                city: req.city.clone(),
                kind: req.kind,
                coord,
                split: req.split,
                checksum: sum,
                path: rel,
            });
        }
    }

    if !failed.is_empty() {
        return Err(CorpusError::Fetch {
            failed,
            fetched: entries,
        });
    }
    Ok(FetchOutcome {
        manifest: Manifest::new(entries),
        downloaded,
    })
}
