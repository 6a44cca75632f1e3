//! Latent-variable decoder model.
//!
//! Observations are modelled as `Yⁱ ~ N(f(Xⁱ), τ² I_p)` with a one-hidden-layer
//! tanh decoder `f(x) = W₂ tanh(W̃₁ x + b₁) + b₂`. In the constrained model the
//! columns of `W̃₁` are the raw columns divided by their Euclidean norms, which
//! fixes the latent scale.

mod layout;
mod posterior;

pub use layout::{Block, Layout, ModelState};
pub use posterior::{Evaluation, LatentPosterior, ModelOptions, Terms};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::linalg::DenseMatrix;

/// Raw columns shorter than this cannot be normalised.
pub const EPS_NORM: f64 = 1e-8;
pub const HALF_CAUCHY_SCALE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("column {column} of W1 has norm {norm:e}, below the normalisation floor")]
    DegenerateColumn { column: usize, norm: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("variance parameters must be strictly positive and finite")]
    NonPositiveVariance,
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("invalid anchors: {0}")]
    InvalidAnchors(String),
}

/// Architecture and data size. The activation is always `tanh`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Observed dimension.
    pub p: usize,
    /// Latent dimension.
    pub q: usize,
    /// Hidden width.
    pub h: usize,
    /// Number of observations.
    pub n: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.q == 0 || self.q >= self.p {
            return Err(ModelError::InvalidSpec(format!(
                "need 0 < q < p, got q = {}, p = {}",
                self.q, self.p
            )));
        }
        if self.h == 0 {
            return Err(ModelError::InvalidSpec("hidden width must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of decoder weights and biases.
    pub fn theta_dim(&self) -> usize {
        self.h * self.q + self.h + self.p * self.h + self.p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// h×q; columns are normalised before use in the constrained model.
    pub w1_raw: DenseMatrix,
    pub b1: Vec<f64>,
    /// p×h.
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

impl DecoderParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            w1_raw: DenseMatrix::zeros(spec.h, spec.q),
            b1: vec![0.0; spec.h],
            w2: DenseMatrix::zeros(spec.p, spec.h),
            b2: vec![0.0; spec.p],
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1_raw.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w1_raw.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    /// Euclidean norms of the raw first-layer columns.
    pub fn column_norms(&self) -> Vec<f64> {
        (0..self.latent_dim())
            .map(|j| {
                (0..self.hidden())
                    .map(|r| self.w1_raw[(r, j)] * self.w1_raw[(r, j)])
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    /// First-layer weights as used by the decoder: normalised columns when
    /// `constrained`, the raw matrix otherwise.
    pub fn effective_w1(&self, constrained: bool) -> Result<DenseMatrix, ModelError> {
        if !constrained {
            return Ok(self.w1_raw.clone());
        }
        let norms = self.column_norms();
        for (column, &norm) in norms.iter().enumerate() {
            if !(norm >= EPS_NORM) {
                return Err(ModelError::DegenerateColumn { column, norm });
            }
        }
        Ok(DenseMatrix::from_fn(self.hidden(), self.latent_dim(), |r, j| {
            self.w1_raw[(r, j)] / norms[j]
        }))
    }

    /// Constrained decoder output `W₂ tanh(W̃₁ x + b₁) + b₂`.
    pub fn decode(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let w1 = self.effective_w1(true)?;
        self.forward_with(&w1, x)
    }

    /// Decoder output with the raw first layer (no column normalisation).
    pub fn decode_unconstrained(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.forward_with(&self.w1_raw, x)
    }

    pub fn decode_with(&self, x: &[f64], constrained: bool) -> Result<Vec<f64>, ModelError> {
        let w1 = self.effective_w1(constrained)?;
        self.forward_with(&w1, x)
    }

    fn forward_with(&self, w1: &DenseMatrix, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.latent_dim() {
            return Err(ModelError::DimensionMismatch(format!(
                "latent vector has length {}, decoder expects {}",
                x.len(),
                self.latent_dim()
            )));
        }
        let hidden: Vec<f64> = (0..self.hidden())
            .map(|r| {
                let a: f64 = w1.row(r).iter().zip(x).map(|(w, v)| w * v).sum();
                (a + self.b1[r]).tanh()
            })
            .collect();
        Ok((0..self.output_dim())
            .map(|k| {
                let o: f64 = self.w2.row(k).iter().zip(&hidden).map(|(w, t)| w * t).sum();
                o + self.b2[k]
            })
            .collect())
    }

    pub fn sum_of_squares(&self) -> f64 {
        // inner sums over the latent index first; see LatentPosterior::evaluate
        let w1: f64 = (0..self.hidden())
            .map(|r| self.w1_raw.row(r).iter().map(|v| v * v).sum::<f64>())
            .sum();
        let rest = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>();
        w1 + rest(&self.b1) + rest(self.w2.as_slice()) + rest(&self.b2)
    }
}

/// Latent matrix plus the mask of anchored rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentConfiguration {
    /// N×q.
    pub x: DenseMatrix,
    pub anchored: Vec<bool>,
}

impl LatentConfiguration {
    pub fn free(x: DenseMatrix) -> Self {
        let n = x.rows();
        Self {
            x,
            anchored: vec![false; n],
        }
    }

    pub fn n_anchored(&self) -> usize {
        self.anchored.iter().filter(|a| **a).count()
    }
}

/// Anchored latent rows held fixed during sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedLatents {
    /// Sorted, distinct observation indices.
    pub indices: Vec<usize>,
    /// One row per index.
    pub values: DenseMatrix,
}

impl FixedLatents {
    pub fn none(q: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: DenseMatrix::zeros(0, q),
        }
    }

    pub fn new(indices: Vec<usize>, values: DenseMatrix) -> Result<Self, ModelError> {
        if indices.len() != values.rows() {
            return Err(ModelError::InvalidAnchors(format!(
                "{} indices but {} value rows",
                indices.len(),
                values.rows()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::InvalidAnchors("indices must be sorted and distinct".into()));
        }
        if !values.is_finite() {
            return Err(ModelError::InvalidAnchors("anchor values must be finite".into()));
        }
        Ok(Self { indices, values })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Noise and prior variances, held on the log scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceParams {
    pub log_tau_sq: f64,
    pub log_sigma_sq: f64,
}

impl VarianceParams {
    pub fn from_natural(tau_sq: f64, sigma_sq: f64) -> Result<Self, ModelError> {
        if !(tau_sq > 0.0 && sigma_sq > 0.0 && tau_sq.is_finite() && sigma_sq.is_finite()) {
            return Err(ModelError::NonPositiveVariance);
        }
        Ok(Self {
            log_tau_sq: tau_sq.ln(),
            log_sigma_sq: sigma_sq.ln(),
        })
    }

    pub fn tau_sq(&self) -> f64 {
        self.log_tau_sq.exp()
    }

    pub fn sigma_sq(&self) -> f64 {
        self.log_sigma_sq.exp()
    }

    fn checked(&self) -> Result<(f64, f64), ModelError> {
        let (t, s) = (self.tau_sq(), self.sigma_sq());
        if t > 0.0 && s > 0.0 && t.is_finite() && s.is_finite() {
            Ok((t, s))
        } else {
            Err(ModelError::NonPositiveVariance)
        }
    }
}

/// Log-density of a half-Cauchy with scale [`HALF_CAUCHY_SCALE`] at `x > 0`.
pub fn half_cauchy_log_density(x: f64) -> f64 {
    let r = x / HALF_CAUCHY_SCALE;
    (2.0 / (HALF_CAUCHY_SCALE * PI)).ln() - (1.0 + r * r).ln()
}

/// Isotropic Gaussian log-likelihood of `y` (N×p) under the constrained decoder.
pub fn log_likelihood(
    params: &DecoderParams,
    latents: &LatentConfiguration,
    tau_sq: f64,
    y: &DenseMatrix,
) -> Result<f64, ModelError> {
    log_likelihood_with(params, latents, tau_sq, y, true)
}

pub fn log_likelihood_with(
    params: &DecoderParams,
    latents: &LatentConfiguration,
    tau_sq: f64,
    y: &DenseMatrix,
    constrained: bool,
) -> Result<f64, ModelError> {
    if !(tau_sq > 0.0) || !tau_sq.is_finite() {
        return Err(ModelError::NonPositiveVariance);
    }
    if y.rows() != latents.x.rows() || y.cols() != params.output_dim() {
        return Err(ModelError::DimensionMismatch(format!(
            "Y is {}x{}, latents have {} rows and the decoder outputs {}",
            y.rows(),
            y.cols(),
            latents.x.rows(),
            params.output_dim()
        )));
    }
    let w1 = params.effective_w1(constrained)?;
    let mut ss = 0.0;
    for i in 0..y.rows() {
        let f = params.forward_with(&w1, latents.x.row(i))?;
        ss += f.iter().zip(y.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let np = (y.rows() * y.cols()) as f64;
    Ok(-ss / (2.0 * tau_sq) - 0.5 * np * (2.0 * PI * tau_sq).ln())
}

/// Which density the free latent rows receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentPrior {
    #[default]
    StandardNormal,
    /// Improper flat prior; contributes nothing.
    Flat,
}

/// Log prior: N(0, σ²) on every decoder weight and bias, the latent prior on
/// free rows (anchored rows are point masses and contribute nothing), and
/// half-Cauchy(5) on both τ² and σ².
pub fn log_prior(
    params: &DecoderParams,
    latents: &LatentConfiguration,
    variances: &VarianceParams,
    latent_prior: LatentPrior,
) -> Result<f64, ModelError> {
    let (tau_sq, sigma_sq) = variances.checked()?;
    let d = (params.w1_raw.as_slice().len()
        + params.b1.len()
        + params.w2.as_slice().len()
        + params.b2.len()) as f64;
    let theta = -params.sum_of_squares() / (2.0 * sigma_sq) - 0.5 * d * (2.0 * PI * sigma_sq).ln();

    let latent = match latent_prior {
        LatentPrior::Flat => 0.0,
        LatentPrior::StandardNormal => {
            let q = latents.x.cols() as f64;
            let mut acc = 0.0;
            let mut free = 0usize;
            for i in 0..latents.x.rows() {
                if latents.anchored[i] {
                    continue;
                }
                free += 1;
                acc += latents.x.row(i).iter().map(|v| v * v).sum::<f64>();
            }
            -0.5 * acc - 0.5 * q * free as f64 * (2.0 * PI).ln()
        }
    };

    Ok(theta + latent + half_cauchy_log_density(tau_sq) + half_cauchy_log_density(sigma_sq))
}
