//! Similarity metrics, class IOU, pixel distributions and strategy tables.

pub mod histogram;
pub mod labels;
pub mod ssim;
pub mod tables;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::generators::PaletteError;

pub use histogram::{emd, pixel_histogram, HistogramAccumulator, PixelHistogram};
pub use labels::{iou, kmeans_colors, label_map, palette_from_clusters, sample_pixels, ClassMask};
pub use ssim::{essi, sobel_magnitude, ssim, ssim_rgb, GrayImage};
pub use tables::{
    aggregate_improvement, corpus_histograms, emd_strategy_table, evaluate_level, round2, EmdRow,
    EmdTable, Improvement, LevelEvaluation, Metric, MetricRow, MetricSelection,
};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Domain(String),
    #[error("missing levels: {}", .0.join(", "))]
    Coverage(Vec<String>),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Palette(#[from] PaletteError),
}
