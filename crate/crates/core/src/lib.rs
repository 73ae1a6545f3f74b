//! Parameter-efficient multi-task learning with orthogonal subspace decoupling.
//!
//! A frozen transformer backbone is adapted per task through lightweight
//! bottleneck Adapters (or LoRA updates), the per-task down-projection
//! subspaces are pushed apart by an orthogonality penalty, and the task
//! losses are balanced by learnable homoscedastic uncertainty weights.
//! Everything runs on a small from-scratch reverse-mode autodiff engine
//! so the whole pipeline is CPU-trainable and gradient-checkable.
//!
//! Crate layout follows the pipeline:
//!
//! - [`autodiff`]: tensors, the op set, backward, and a finite-difference
//!   gradient checker
//! - [`backbone`]: the shared transformer encoder with a trunk/branch split
//! - [`peft`]: per-task Adapter and LoRA parameter groups
//! - [`objective`]: task losses, uncertainty weighting, orthogonality penalty
//! - [`heads`]: per-task classification heads
//! - [`dataset`]: synthetic correlated multi-task image benchmark plus I/O
//! - [`training`]: AdamW, plateau schedule, the training loop, sweeps
//! - [`viz`]: accuracy metrics, adapter activation heatmaps, reports

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod heads;
pub mod model;
pub mod objective;
pub mod peft;
pub mod rng;
pub mod task;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
pub use task::Task;
