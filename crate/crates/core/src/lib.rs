//! Backdoor detection across a zoo of trained classifiers.
//!
//! Every model contributes the final-layer activations it produces for a
//! common grid of exemplars (`M` per class, `C` classes). The activations
//! are random-projected to a uniform width, decomposed jointly with either
//! independent vector analysis (IVA-G) or PARAFAC2, and the leading source of
//! every model is correlated against the sources of models known to carry a
//! backdoor. A model that shares a significant (Bonferroni-corrected)
//! correlation with any backdoored reference is flagged.
//!
//! The pipeline stages live in separate modules:
//!
//! - [`zoo`]: manifest and activation-tensor (ATF) ingest
//! - [`features`]: random projection to `MC x R` feature matrices
//! - [`iva`]: PCA whitening and second-order IVA
//! - [`parafac2`]: direct-fitting PARAFAC2 ALS
//! - [`stats`]: correlation significance, verdicts and metrics
//! - [`cluster`]: 2-means over per-model contributions, silhouette
//! - [`synth`]: synthetic zoos with a planted backdoor subspace
//! - [`pipeline`], [`report`], [`heatmap`]: orchestration and outputs

pub mod cluster;
pub mod features;
pub mod heatmap;
pub mod iva;
mod linalg;
pub mod parafac2;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod synth;
pub mod zoo;

pub use nalgebra::{DMatrix, DVector};
