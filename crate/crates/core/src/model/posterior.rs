use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{
    half_cauchy_log_density, Block, FixedLatents, Layout, LatentPrior, ModelError, ModelSpec,
    ModelState, EPS_NORM, HALF_CAUCHY_SCALE,
};
use crate::linalg::DenseMatrix;
use crate::sampler::LogDensity;

/// Switches for the three additive pieces of the log-posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Terms {
    pub likelihood: bool,
    pub prior: bool,
    /// Change-of-variables term for the log-variance coordinates.
    pub jacobian: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Self {
            likelihood: true,
            prior: true,
            jacobian: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelOptions {
    /// Normalise the columns of W1 inside the decoder.
    pub constrained: bool,
    pub latent_prior: LatentPrior,
    pub terms: Terms,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            constrained: true,
            latent_prior: LatentPrior::StandardNormal,
            terms: Terms::default(),
        }
    }
}

/// The pieces of one log-posterior evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub log_likelihood: f64,
    pub log_prior: f64,
    pub log_jacobian: f64,
}

impl Evaluation {
    pub fn total(&self) -> f64 {
        self.log_likelihood + self.log_prior + self.log_jacobian
    }
}

/// Anchored log-posterior over the flat coordinate vector.
#[derive(Debug, Clone)]
pub struct LatentPosterior {
    y: DenseMatrix,
    layout: Layout,
    anchors: FixedLatents,
    options: ModelOptions,
}

impl LatentPosterior {
    pub fn new(
        y: DenseMatrix,
        spec: ModelSpec,
        anchors: Option<FixedLatents>,
        options: ModelOptions,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        if y.rows() != spec.n || y.cols() != spec.p {
            return Err(ModelError::DimensionMismatch(format!(
                "Y is {}x{}, spec says {}x{}",
                y.rows(),
                y.cols(),
                spec.n,
                spec.p
            )));
        }
        if !y.is_finite() {
            return Err(ModelError::DimensionMismatch("Y contains non-finite values".into()));
        }
        let anchors = anchors.unwrap_or_else(|| FixedLatents::none(spec.q));
        if anchors.values.cols() != spec.q {
            return Err(ModelError::InvalidAnchors(format!(
                "anchor values have {} columns, q = {}",
                anchors.values.cols(),
                spec.q
            )));
        }
        let layout = Layout::new(spec, &anchors.indices)?;
        Ok(Self {
            y,
            layout,
            anchors,
            options,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn spec(&self) -> &ModelSpec {
        self.layout.spec()
    }

    pub fn anchors(&self) -> &FixedLatents {
        &self.anchors
    }

    pub fn options(&self) -> &ModelOptions {
        &self.options
    }

    pub fn data(&self) -> &DenseMatrix {
        &self.y
    }

    pub fn unpack(&self, z: &[f64]) -> Result<ModelState, ModelError> {
        self.layout.unpack(z, &self.anchors)
    }

    pub fn pack(&self, state: &ModelState) -> Result<Vec<f64>, ModelError> {
        self.layout.pack(state)
    }

    /// Log-posterior at `z`; `-inf` where the model is undefined.
    pub fn log_posterior(&self, z: &[f64]) -> f64 {
        self.evaluate(z, None).map_or(f64::NEG_INFINITY, |e| e.total())
    }

    /// Log-posterior and its gradient. `grad` is overwritten.
    pub fn log_posterior_and_gradient(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        match self.evaluate(z, Some(grad)) {
            Ok(e) => e.total(),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Evaluates the enabled terms, optionally accumulating the exact gradient.
    pub fn evaluate(&self, z: &[f64], grad: Option<&mut [f64]>) -> Result<Evaluation, ModelError> {
        let layout = &self.layout;
        let ModelSpec { p, q, h, n } = *layout.spec();
        if z.len() != layout.dim() {
            return Err(ModelError::DimensionMismatch(format!(
                "coordinate vector has length {}, expected {}",
                z.len(),
                layout.dim()
            )));
        }
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            if g.len() != z.len() {
                return Err(ModelError::DimensionMismatch("gradient buffer length".into()));
            }
            g.iter_mut().for_each(|v| *v = 0.0);
        }

        let r_w1 = layout.range(Block::W1);
        let r_b1 = layout.range(Block::B1);
        let r_w2 = layout.range(Block::W2);
        let r_b2 = layout.range(Block::B2);
        let r_x = layout.range(Block::FreeLatents);
        let i_tau = layout.log_tau_sq_index();
        let i_sigma = layout.log_sigma_sq_index();

        let w1_raw = &z[r_w1.clone()];
        let b1 = &z[r_b1.clone()];
        let w2 = &z[r_w2.clone()];
        let b2 = &z[r_b2.clone()];
        let x_free = &z[r_x.clone()];
        let u_tau = z[i_tau];
        let u_sigma = z[i_sigma];
        let tau_sq = u_tau.exp();
        let sigma_sq = u_sigma.exp();
        if !(tau_sq > 0.0 && sigma_sq > 0.0 && tau_sq.is_finite() && sigma_sq.is_finite()) {
            return Err(ModelError::NonPositiveVariance);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::DimensionMismatch("non-finite coordinate".into()));
        }

        let mut out = Evaluation {
            log_likelihood: 0.0,
            log_prior: 0.0,
            log_jacobian: 0.0,
        };

        if self.options.terms.likelihood {
            // effective first layer
            let mut norms = vec![1.0; q];
            if self.options.constrained {
                for (j, norm) in norms.iter_mut().enumerate() {
                    *norm = (0..h).map(|r| w1_raw[r * q + j] * w1_raw[r * q + j]).sum::<f64>().sqrt();
                    if !(*norm >= EPS_NORM) {
                        return Err(ModelError::DegenerateColumn { column: j, norm: *norm });
                    }
                }
            }
            let w1: Vec<f64> = if self.options.constrained {
                (0..h * q).map(|k| w1_raw[k] / norms[k % q]).collect()
            } else {
                w1_raw.to_vec()
            };

            let want_grad = grad.is_some();
            let mut g_w1 = vec![0.0; h * q];
            let mut g_b1 = vec![0.0; h];
            let mut g_w2 = vec![0.0; p * h];
            let mut g_b2 = vec![0.0; p];
            let mut g_x = vec![0.0; x_free.len()];
            let mut t = vec![0.0; h];
            let mut resid = vec![0.0; p];
            let mut g_a = vec![0.0; h];

            let mut ss = 0.0;
            for i in 0..n {
                let slot = layout.free_slot(i);
                let x: &[f64] = match slot {
                    Some(s) => &x_free[s * q..(s + 1) * q],
                    None => {
                        let k = self.anchors.indices.binary_search(&i).expect("anchored row");
                        self.anchors.values.row(k)
                    }
                };
                for r in 0..h {
                    let row = &w1[r * q..(r + 1) * q];
                    let a: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
                    t[r] = (a + b1[r]).tanh();
                }
                let yi = self.y.row(i);
                for k in 0..p {
                    let row = &w2[k * h..(k + 1) * h];
                    let f: f64 = row.iter().zip(&t).map(|(w, v)| w * v).sum::<f64>() + b2[k];
                    resid[k] = f - yi[k];
                }
                ss += resid.iter().map(|r| r * r).sum::<f64>();

                if want_grad {
                    // accumulate d(-ss/2)/d·; scaled by 1/τ² afterwards
                    g_a.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..p {
                        let gf = -resid[k];
                        g_b2[k] += gf;
                        let gw = &mut g_w2[k * h..(k + 1) * h];
                        let w2row = &w2[k * h..(k + 1) * h];
                        for r in 0..h {
                            gw[r] += gf * t[r];
                            g_a[r] += gf * w2row[r];
                        }
                    }
                    for r in 0..h {
                        g_a[r] *= 1.0 - t[r] * t[r];
                        g_b1[r] += g_a[r];
                        for j in 0..q {
                            g_w1[r * q + j] += g_a[r] * x[j];
                        }
                    }
                    if let Some(s) = slot {
                        let gx = &mut g_x[s * q..(s + 1) * q];
                        for r in 0..h {
                            for j in 0..q {
                                gx[j] += g_a[r] * w1[r * q + j];
                            }
                        }
                    }
                }
            }
            let np = (n * p) as f64;
            out.log_likelihood = -ss / (2.0 * tau_sq) - 0.5 * np * (2.0 * PI * tau_sq).ln();

            if let Some(g) = grad.as_deref_mut() {
                let inv = 1.0 / tau_sq;
                if self.options.constrained {
                    // d(w/‖w‖)/dw = (I - ŵŵᵀ)/‖w‖, column by column
                    for j in 0..q {
                        let dot: f64 = (0..h).map(|r| w1[r * q + j] * g_w1[r * q + j]).sum();
                        for r in 0..h {
                            let k = r * q + j;
                            g[r_w1.start + k] = inv * (g_w1[k] - w1[k] * dot) / norms[j];
                        }
                    }
                } else {
                    for k in 0..h * q {
                        g[r_w1.start + k] = inv * g_w1[k];
                    }
                }
                for (dst, src) in g[r_b1.clone()].iter_mut().zip(&g_b1) {
                    *dst = inv * src;
                }
                for (dst, src) in g[r_w2.clone()].iter_mut().zip(&g_w2) {
                    *dst = inv * src;
                }
                for (dst, src) in g[r_b2.clone()].iter_mut().zip(&g_b2) {
                    *dst = inv * src;
                }
                for (dst, src) in g[r_x.clone()].iter_mut().zip(&g_x) {
                    *dst = inv * src;
                }
                g[i_tau] += ss / (2.0 * tau_sq) - 0.5 * np;
            }
        }

        if self.options.terms.prior {
            // Sums over W1 run over the latent index innermost, so permuting
            // latent dimensions only reorders commutative pairs when q <= 2.
            let ss_w1: f64 = (0..h)
                .map(|r| w1_raw[r * q..(r + 1) * q].iter().map(|v| v * v).sum::<f64>())
                .sum();
            let sq = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>();
            let ss_theta = ss_w1 + sq(b1) + sq(w2) + sq(b2);
            let d = layout.theta_dim() as f64;
            let theta = -ss_theta / (2.0 * sigma_sq) - 0.5 * d * (2.0 * PI * sigma_sq).ln();

            let latent = match self.options.latent_prior {
                LatentPrior::Flat => 0.0,
                LatentPrior::StandardNormal => {
                    let acc: f64 = x_free.chunks(q).map(|row| row.iter().map(|v| v * v).sum::<f64>()).sum();
                    -0.5 * acc - 0.5 * x_free.len() as f64 * (2.0 * PI).ln()
                }
            };
            out.log_prior = theta
                + latent
                + half_cauchy_log_density(tau_sq)
                + half_cauchy_log_density(sigma_sq);

            if let Some(g) = grad.as_deref_mut() {
                let inv = 1.0 / sigma_sq;
                for k in 0..layout.theta_dim() {
                    g[k] -= z[k] * inv;
                }
                g[i_sigma] += ss_theta / (2.0 * sigma_sq) - 0.5 * d;
                if self.options.latent_prior == LatentPrior::StandardNormal {
                    for k in r_x.clone() {
                        g[k] -= z[k];
                    }
                }
                g[i_tau] += half_cauchy_dlog_du(tau_sq);
                g[i_sigma] += half_cauchy_dlog_du(sigma_sq);
            }
        }

        if self.options.terms.jacobian {
            out.log_jacobian = u_tau + u_sigma;
            if let Some(g) = grad.as_deref_mut() {
                g[i_tau] += 1.0;
                g[i_sigma] += 1.0;
            }
        }

        Ok(out)
    }
}

/// d/du of the half-Cauchy log-density at x = exp(u).
fn half_cauchy_dlog_du(x: f64) -> f64 {
    let r2 = (x / HALF_CAUCHY_SCALE).powi(2);
    -2.0 * r2 / (1.0 + r2)
}

impl LogDensity for LatentPosterior {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density_and_gradient(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        self.log_posterior_and_gradient(z, grad)
    }
}
