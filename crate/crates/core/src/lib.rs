//! Graph-based collaborative learning engine for patient-disease risk
//! ranking.
//!
//! The crate trains a hop-mixed bipartite graph propagation model with a
//! pairwise ranking objective on sparse patient-disease interactions and
//! produces per-patient ranked disease-risk lists, evaluation reports, and
//! disease-association analyses. A synthetic generator with planted
//! low-rank structure stands in for gated clinical data.
//!
//! Module map:
//! - [`graph`]: sparse kernels (CSR, normalized Laplacian, spmm)
//! - [`model`]: embedding tables and the propagation forward pass
//! - [`train`]: BPR loss, exact gradients, Adam, the training loop
//! - [`data`]: ingestion, feature encoding, temporal split, synthesis
//! - [`eval`]: top-K ranking metrics and AUC
//! - [`analysis`]: comorbidity/correlation discrepancy and embedding export

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod train;

pub use error::{Error, Result};
