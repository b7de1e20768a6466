//! Concept Embedding Models, hierarchical CEMs and sub-concept discovery.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: `f64` matrices, affine maps, losses, Adam, gradient checks.
//! - [`worlds`]: seeded synthetic concept worlds with held-out concept banks.
//! - [`cem`] / [`hicem`]: the flat and hierarchical concept models (one shared
//!   network in [`net`]), training with random interventions, and test-time
//!   interventions.
//! - [`sae`]: BatchTopK sparse autoencoders.
//! - [`splitting`]: turning a trained model's embedding space into labelled
//!   sub-concepts (SAE and clustering variants).
//! - [`eval`]: ROC-AUC, concept-bank matching, reports and intervention curves.
//! - [`pipeline`], [`container`], [`api`]: run orchestration, file formats and the
//!   JSON payloads served to the explorer.

pub mod api;
pub mod cem;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod hicem;
pub mod net;
pub mod numkit;
pub mod pipeline;
pub mod rng;
pub mod sae;
pub mod train;
pub mod splitting;
pub mod worlds;

pub use error::{Error, Result};
