//! Infrared small target detection (IRSTD) building blocks.
//!
//! The crate is organized around a small reverse-mode autodiff graph
//! ([`graph`]) on top of `ndarray`, with the model pieces layered above it:
//!
//! * [`backbone`] — configurable 4-stage hierarchical image encoder,
//! * [`query`] — sparse/dense query engine (bi-direction attention,
//!   multi-scale deformable fusion) plus the operation-count model,
//! * [`fpn`] — tiny FPN with query interaction, early decode heads and
//!   dense-prompt injection,
//! * [`decoder`] — two-way transformer mask decoder,
//! * [`losses`] — BCE / DICE / KL losses, the distillation objective and
//!   point-sampled mask loss,
//! * [`distill`] — teacher interface, mock granularity teacher and the
//!   distillation loop,
//! * [`train`] — fine-tuning loop,
//! * [`data`] — dataset loading, augmentation and the synthetic generator,
//! * [`metrics`] — IoU / Pd / Fa evaluation with report rendering,
//! * [`checkpoint`] — tar-of-npy parameter archives.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod distill;
pub mod fpn;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod query;
pub mod train;

pub use graph::{Graph, OpCounts, Var};
pub use losses::LossConfig;
pub use metrics::DetectionReport;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
