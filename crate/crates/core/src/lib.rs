//! Multi-scale map generation over XYZ tile pyramids.
//!
//! Remote-sensing tiles are turned into maps either by one generator per
//! zoom (parallel) or by translating the top zoom and deriving smaller
//! scales from merged map quads (series). The analytics module scores the
//! results with SSIM, ESSI, class IOU and pixel-distribution EMD.

pub mod analytics;
pub mod config;
pub mod corpus;
pub mod generators;
pub mod report;
pub mod strategies;
pub mod tile;

pub use tile::{merge_downsample, mosaic, GeometryError, Mosaic, TileCoord, TileImage};
