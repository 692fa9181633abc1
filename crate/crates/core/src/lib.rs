//! Multimodal recommendation toolkit.
//!
//! Pipeline: per-entity modality embeddings ([`embeddings`]) are combined by
//! a [`fusion`] strategy, optionally denoised and augmented by a variational
//! autoencoder ([`vae`]), and scored by matrix-factorization or NeuMF heads
//! ([`recsys`]). [`metrics`] implements MSE, Precision@K and NDCG@K,
//! [`data`] handles loading, splitting and synthetic benchmarks, and
//! [`experiments`] runs ablation grids and writes reports.

pub mod data;
pub mod embeddings;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod metrics;
pub mod numerics;
pub mod recsys;
pub mod vae;

pub use error::{Error, Result};
