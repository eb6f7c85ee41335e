use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::plugin::{timeout_from_env, PluginOptions, DEFAULT_TIMEOUT};
use super::{spawn_plugin_pool, Backend, EdgeId, GeneratorError, GeneratorHandle, Palette};
use crate::corpus::sha256_hex;
use crate::strategies::{StrategyConfig, StrategyKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Identity,
    PaletteProject {
        #[serde(default)]
        palette: Option<Palette>,
    },
    DegradeBlur {
        #[serde(default = "default_radius")]
        radius: u32,
        #[serde(default)]
        palette: Option<Palette>,
    },
    Plugin {
        command: Vec<String>,
        #[serde(default = "default_processes")]
        processes: usize,
        #[serde(default)]
        timeout_secs: Option<f64>,
    },
}

fn default_radius() -> u32 {
    1
}

fn default_processes() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub edge: EdgeId,
    #[serde(flatten)]
    pub backend: BackendConfig,
}

/// Declarative description of which generator serves which edge.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryConfig {
    /// Backend for any required edge not listed in `edges`.
    #[serde(default)]
    pub default: Option<BackendConfig>,
    #[serde(default)]
    pub edges: Vec<EdgeConfig>,
}

impl RegistryConfig {
    pub fn uniform(backend: BackendConfig) -> Self {
        RegistryConfig {
            default: Some(backend),
            edges: Vec::new(),
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("registry config serializes")
                .as_bytes(),
        )
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry lacks edges required by the {strategy} strategy: {}", fmt_edges(.missing))]
    Missing {
        strategy: StrategyKind,
        missing: Vec<EdgeId>,
    },
    #[error("edge {0} is configured more than once")]
    Duplicate(EdgeId),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

fn fmt_edges(edges: &[EdgeId]) -> String {
    edges
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Every edge a strategy needs between `top` and `bottom` zoom.
pub fn required_edges(kind: StrategyKind, top: u8, bottom: u8) -> Vec<EdgeId> {
    match kind {
        StrategyKind::Parallel => (bottom..=top).rev().map(EdgeId::r2m).collect(),
        StrategyKind::Series => std::iter::once(EdgeId::r2m(top))
            .chain(((bottom + 1)..=top).rev().map(EdgeId::m2m))
            .collect(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    handles: BTreeMap<EdgeId, GeneratorHandle>,
}

impl Registry {
    pub fn from_handles(handles: impl IntoIterator<Item = GeneratorHandle>) -> Self {
        Registry {
            handles: handles.into_iter().map(|h| (h.edge, h)).collect(),
        }
    }

    pub fn get(&self, edge: &EdgeId) -> Option<&GeneratorHandle> {
        self.handles.get(edge)
    }

    pub fn edges(&self) -> impl Iterator<Item = &EdgeId> {
        self.handles.keys()
    }

    pub fn len(&self) -> usize {
        self.handles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.handles.is_empty()
    }

    /// Checks that every edge `cfg` needs is present.
    pub fn check(&self, cfg: &StrategyConfig) -> Result<(), RegistryError> {
        let missing: Vec<_> = required_edges(cfg.kind, cfg.top_zoom, cfg.bottom_zoom)
            .into_iter()
            .filter(|e| !self.handles.contains_key(e))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(RegistryError::Missing {
                strategy: cfg.kind,
                missing,
            })
        }
    }
}

fn instantiate(
    edge: EdgeId,
    backend: &BackendConfig,
    tile_size: u32,
) -> Result<GeneratorHandle, GeneratorError> {
    let handle = match backend {
        BackendConfig::Identity => GeneratorHandle::identity(edge, tile_size),
        BackendConfig::PaletteProject { palette } => GeneratorHandle::new(
            edge,
            tile_size,
            Backend::PaletteProject(palette.clone().unwrap_or_else(Palette::standard)),
        ),
        BackendConfig::DegradeBlur { radius, palette } => GeneratorHandle::new(
            edge,
            tile_size,
            Backend::DegradeBlur {
                radius: *radius,
                palette: palette.clone().unwrap_or_else(Palette::standard),
            },
        ),
        BackendConfig::Plugin {
            command,
            processes,
            timeout_secs,
        } => {
            // The environment override beats the config file.
            let timeout = timeout_from_env()
                .or_else(|| timeout_secs.map(Duration::from_secs_f64))
                .unwrap_or(DEFAULT_TIMEOUT);
            let options = PluginOptions {
                timeout,
                processes: (*processes).max(1),
            };
            spawn_plugin_pool(command, edge, tile_size, &options)?
        }
    };
    Ok(handle)
}

/// Builds handles for exactly the edges `strategy` needs. Missing edges are
/// reported together before any plugin is started.
pub fn load_registry(
    config: &RegistryConfig,
    strategy: &StrategyConfig,
    tile_size: u32,
) -> Result<Registry, RegistryError> {
    let mut by_edge: BTreeMap<EdgeId, &BackendConfig> = BTreeMap::new();
    for e in &config.edges {
        if by_edge.insert(e.edge, &e.backend).is_some() {
            return Err(RegistryError::Duplicate(e.edge));
        }
    }
    let required = required_edges(strategy.kind, strategy.top_zoom, strategy.bottom_zoom);
    let missing: Vec<EdgeId> = required
        .iter()
        .filter(|e| !by_edge.contains_key(e) && config.default.is_none())
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(RegistryError::Missing {
            strategy: strategy.kind,
            missing,
        });
    }
    let mut handles = Vec::with_capacity(required.len());
    for edge in required {
        let backend = by_edge
            .get(&edge)
            .copied()
            .or(config.default.as_ref())
            .expect("checked above");
        handles.push(instantiate(edge, backend, tile_size)?);
    }
    Ok(Registry::from_handles(handles))
}
