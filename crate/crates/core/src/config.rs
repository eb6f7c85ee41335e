//! The declarative run configuration document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::labels::{DEFAULT_ITERATIONS, DEFAULT_K};
use crate::analytics::MetricSelection;
use crate::corpus::{
    SplitPolicy, TileKind, TileRegion, TileSource, DEFAULT_BOTTOM_ZOOM, DEFAULT_TOP_ZOOM,
};
use crate::generators::{Palette, RegistryConfig};
use crate::strategies::{StrategyConfig, StrategyKind};
use crate::tile::DEFAULT_TILE_SIZE;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub root: PathBuf,
    #[serde(default = "default_tile_size")]
    pub tile_size: u32,
    /// Cities whose tiles form the test split; `"*"` selects every city.
    #[serde(default)]
    pub test_cities: Option<Vec<String>>,
}

fn default_tile_size() -> u32 {
    DEFAULT_TILE_SIZE
}

impl CorpusSection {
    pub fn split_policy(&self) -> SplitPolicy {
        match &self.test_cities {
            Some(cities) => SplitPolicy {
                test_cities: cities.iter().cloned().collect(),
            },
            None => SplitPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchRegion {
    pub city: String,
    pub kind: TileKind,
    #[serde(flatten)]
    pub region: TileRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub url_template: String,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub user_agent: Option<String>,
    #[serde(default)]
    pub backoff_ms: Option<u64>,
    /// Inclusive `[bottom, top]` zoom range to download.
    #[serde(default = "default_fetch_zooms")]
    pub zooms: [u8; 2],
    #[serde(default)]
    pub regions: Vec<FetchRegion>,
}

fn default_rate() -> f64 {
    2.0
}

fn default_retries() -> u32 {
    3
}

fn default_fetch_zooms() -> [u8; 2] {
    [DEFAULT_BOTTOM_ZOOM, DEFAULT_TOP_ZOOM]
}

impl SourceSection {
    pub fn tile_source(&self) -> TileSource {
        let mut s = TileSource::new(self.url_template.clone(), self.rate, self.retries);
        if let Some(ua) = &self.user_agent {
            s.user_agent = ua.clone();
        }
        if let Some(b) = self.backoff_ms {
            s.backoff_ms = b;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    #[serde(default = "default_kind")]
    pub kind: StrategyKind,
    #[serde(default = "default_top")]
    pub top_zoom: u8,
    #[serde(default = "default_bottom")]
    pub bottom_zoom: u8,
}

fn default_kind() -> StrategyKind {
    StrategyKind::Series
}

fn default_top() -> u8 {
    DEFAULT_TOP_ZOOM
}

fn default_bottom() -> u8 {
    DEFAULT_BOTTOM_ZOOM
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection {
            kind: default_kind(),
            top_zoom: default_top(),
            bottom_zoom: default_bottom(),
        }
    }
}

impl StrategySection {
    pub fn config(&self) -> StrategyConfig {
        StrategyConfig::new(self.kind, self.top_zoom, self.bottom_zoom)
    }
}

/// Palette derivation by k-means over real map pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmeansSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Class of each cluster, in cluster order.
    pub classes: Vec<String>,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

fn default_samples() -> usize {
    100_000
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default)]
    pub selection: MetricSelection,
    /// Labeling palette for IOU; the standard palette when absent.
    #[serde(default)]
    pub palette: Option<Palette>,
    #[serde(default)]
    pub kmeans: Option<KmeansSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_output_dir")]
    pub dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_output_dir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed: u64,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub source: Option<SourceSection>,
    #[serde(default)]
    pub registry: RegistryConfig,
    #[serde(default)]
    pub strategy: StrategySection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_workers() -> usize {
    1
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = RunConfig::parse(&text, path)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.corpus.root.is_relative() {
            self.corpus.root = base.join(&self.corpus.root);
        }
        if self.output.dir.is_relative() {
            self.output.dir = base.join(&self.output.dir);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if self.workers == 0 {
            problems.push("workers must be at least 1".to_string());
        }
        if self.corpus.tile_size == 0 {
            problems.push("tile_size must be positive".to_string());
        }
        if let Err(e) = self.strategy.config().validate() {
            problems.push(e.to_string());
        }
        if let Some(km) = &self.metrics.kmeans {
            if km.classes.len() != km.k {
                problems.push(format!(
                    "kmeans maps {} classes onto {} clusters",
                    km.classes.len(),
                    km.k
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems.join("; ")))
        }
    }

    /// `validate` plus the corpus root existing on disk.
    pub fn validate_with_corpus(&self) -> Result<(), ConfigError> {
        self.validate()?;
        if !self.corpus.root.is_dir() {
            return Err(ConfigError::Invalid(format!(
                "corpus root {} does not exist",
                self.corpus.root.display()
            )));
        }
        Ok(())
    }

    pub fn palette(&self) -> Palette {
        self.metrics
            .palette
            .clone()
            .unwrap_or_else(Palette::standard)
    }
}
