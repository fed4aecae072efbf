//! Multi-omics cancer subtype discovery toolkit.
//!
//! The toolkit trains an unsupervised MLP + multi-head-attention autoencoder
//! on concatenated omics blocks, clusters the latent factors (fixed-k K-means
//! or automatic-k consensus clustering), evaluates subtypes against survival
//! and clinical covariates (Kaplan-Meier, log-rank with permutation p-values,
//! chi-square / Kruskal-Wallis enrichment, NMI/ARI, Friedman), and ranks
//! candidate biomarkers with a random forest.
//!
//! Modules:
//! - [`numcore`]: dense matrices, a seeded portable RNG, and a reverse-mode
//!   autodiff tape sufficient to train the network.
//! - [`model`]: the autoencoder itself (config, init, encode/decode, training).
//! - [`cluster`]: K-means, consensus clustering, PAC-based k selection.
//! - [`survstats`]: survival and enrichment statistics.
//! - [`biomarker`]: random-forest fitting and Gini importance ranking.
//! - [`pipeline`]: ingestion, preprocessing, synthetic data, batch orchestration.

pub mod biomarker;
pub mod cluster;
pub mod error;
pub mod model;
pub mod numcore;
pub mod pipeline;
pub mod survstats;

#[cfg(feature = "cli")]
pub mod cli;

pub use error::{Error, Result};
