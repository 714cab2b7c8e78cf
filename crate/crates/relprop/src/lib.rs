//! Toy-scale Transformer NMT stack with a layer-wise relevance propagation
//! engine for decomposing predictions into per-token source and target-prefix
//! contributions.
//!
//! The crate is organised around the pipeline:
//!
//! ```text
//! data  ──► model (traced forward) ──► lrp (relevance propagation)
//!   │            │                         │
//!   └── train (MLE / MRT) ──► checkpoints  └── analysis (contribution stats)
//! ```
//!
//! Everything is CPU-only, f32 model math with f64 accumulators in
//! reductions, and fully deterministic given seeds.

pub mod analysis;
pub mod data;
pub mod lrp;
pub mod model;
pub mod numerics;
pub mod train;

pub use numerics::{ComputeTape, NodeId, NumericsError, SeededRng, Tensor};
