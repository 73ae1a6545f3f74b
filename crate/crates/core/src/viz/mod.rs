//! Evaluation metrics, activation heatmaps, and report generation.

pub mod heatmap;
pub mod metrics;
pub mod report;

pub use heatmap::{ActivationMap, ActivationTap};
pub use metrics::{accuracy, argmax_rows, confusion};
