//! Desk-scale power-grid learning toolkit.
//!
//! The crate covers the full pipeline: synthetic MV/HV grid generation with
//! Newton-Raphson AC power-flow ground truth, a small reverse-mode autodiff
//! engine, an edge-aware self-attention GNN that iteratively refines voltage
//! states, physics-informed losses, LoRA-style low-rank adaptation, and the
//! training/evaluation machinery (AdamW, warm-restart schedule, few-shot
//! sweeps, Wilcoxon tests, Pareto fronts).

pub mod adapt;
pub mod error;
pub mod grid;
pub mod loss;
pub mod model;
pub mod nr;
pub mod report;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
