//! Bayesian nonlinear dimensionality reduction with a latent-variable MLP
//! decoder.
//!
//! The decoder `f(x) = W₂ tanh(W̃₁x + b₁) + b₂` normalises the columns of its
//! first layer, a small set of latent points is pinned to anchor values built
//! from a locally-linear embedding and a pretrained network, and the remaining
//! latents and weights are sampled with NUTS. The analysis module turns
//! posterior draws into pairwise-distance traces, convergence diagnostics and
//! co-clustering summaries.

pub mod analysis;
pub mod anchors;
pub mod cli;
pub mod data;
pub mod linalg;
pub mod model;
pub mod sampler;
pub mod seed;

use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Anchors(#[from] anchors::AnchorError),
    #[error(transparent)]
    Sampler(#[from] sampler::SamplerError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("missing value at row {row}, column {column}")]
    MissingValue { row: usize, column: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
