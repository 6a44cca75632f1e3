//! Anchor construction: pick a random subset of observations, embed it with
//! locally-linear embedding, pretrain a decoder on the embedding, and scale
//! each embedding axis by the norm of the matching first-layer column.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::{cholesky_solve, sym_eig, DenseMatrix, LinalgError};
use crate::model::{DecoderParams, FixedLatents, ModelError, ModelSpec};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnchorError {
    #[error("need 0 < N_ref < N, got N_ref = {n_ref} for N = {n}")]
    InvalidCount { n: usize, n_ref: usize },
    #[error("{points} points are too few for {needed} (neighbours or target dimension)")]
    TooFewPoints { points: usize, needed: usize },
    #[error("pretraining loss became non-finite at learning rate {rate}")]
    NonFiniteLoss { rate: f64 },
    #[error("invalid anchor configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, AnchorError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LLEConfig {
    pub n_neighbors: usize,
    /// Local Gram regulariser, relative to `tr(G)/k`.
    pub ridge: f64,
    pub target_dim: usize,
}

impl Default for LLEConfig {
    fn default() -> Self {
        Self {
            n_neighbors: 5,
            ridge: 1e-3,
            target_dim: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 2000,
        }
    }
}

/// Which observations the locally-linear embedding sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LleScope {
    /// Only the anchor subset.
    #[default]
    Anchors,
    /// All observations; anchor rows are taken from the full embedding.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub n_ref: usize,
    #[serde(default)]
    pub lle: LLEConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub scope: LleScope,
}

/// Uniformly random, sorted subset of `n_ref` out of `n` indices.
pub fn select_anchors(n: usize, n_ref: usize, seed: u64) -> Result<Vec<usize>> {
    if n_ref == 0 || n_ref >= n {
        return Err(AnchorError::InvalidCount { n, n_ref });
    }
    let mut rng = seed::rng(seed);
    let mut idx = sample(&mut rng, n, n_ref).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest other points of every row, ties broken by index.
fn nearest_neighbors(y: &DenseMatrix, k: usize) -> Vec<Vec<usize>> {
    let m = y.rows();
    (0..m)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..m)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(y.row(i), y.row(j)), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Reconstruction weights, one row per point (zero outside its neighbours).
pub fn lle_weights(y: &DenseMatrix, cfg: &LLEConfig) -> Result<DenseMatrix> {
    let m = y.rows();
    let k = cfg.n_neighbors;
    if k == 0 || m <= k {
        return Err(AnchorError::TooFewPoints { points: m, needed: k + 1 });
    }
    if !(cfg.ridge >= 0.0) {
        return Err(AnchorError::InvalidConfig(format!("ridge must be >= 0, got {}", cfg.ridge)));
    }
    let neighbors = nearest_neighbors(y, k);
    let mut w = DenseMatrix::zeros(m, m);
    let ones = DenseMatrix::from_vec(k, 1, vec![1.0; k])?;
    for (i, nb) in neighbors.iter().enumerate() {
        let centered = DenseMatrix::from_fn(k, y.cols(), |a, c| y[(nb[a], c)] - y[(i, c)]);
        let g = DenseMatrix::from_fn(k, k, |a, b| {
            centered.row(a).iter().zip(centered.row(b)).map(|(u, v)| u * v).sum()
        });
        let trace: f64 = (0..k).map(|a| g[(a, a)]).sum();
        let reg = if trace > 0.0 { cfg.ridge * trace / k as f64 } else { cfg.ridge };
        let solve = |g: &DenseMatrix, reg: f64| {
            let mut gr = g.clone();
            for a in 0..k {
                gr.as_mut_slice()[a * k + a] += reg;
            }
            cholesky_solve(&gr, &ones)
        };
        let sol = match solve(&g, reg) {
            Ok(s) => s,
            Err(LinalgError::NotPositiveDefinite { .. }) => solve(&g, 10.0 * reg.max(f64::MIN_POSITIVE))?,
            Err(e) => return Err(e.into()),
        };
        let total: f64 = sol.as_slice().iter().sum();
        for (a, &j) in nb.iter().enumerate() {
            w.as_mut_slice()[i * m + j] = sol.as_slice()[a] / total;
        }
    }
    Ok(w)
}

/// `(I − W)ᵀ(I − W)`, exactly symmetric.
pub fn lle_cost_matrix(w: &DenseMatrix) -> DenseMatrix {
    let m = w.rows();
    DenseMatrix::from_fn(m, m, |i, j| f64::from(u8::from(i == j)) - w[(i, j)]).gram()
}

/// Locally-linear embedding of the rows of `y` into `cfg.target_dim`
/// dimensions. Columns are eigenvectors 2..q+1 of the cost matrix scaled by
/// `√M`, each signed so that its largest-magnitude entry is positive.
pub fn lle_embed(y: &DenseMatrix, cfg: &LLEConfig) -> Result<DenseMatrix> {
    let m = y.rows();
    let q = cfg.target_dim;
    if q == 0 || m <= q + 1 {
        return Err(AnchorError::TooFewPoints { points: m, needed: q + 2 });
    }
    let w = lle_weights(y, cfg)?;
    let eig = sym_eig(&lle_cost_matrix(&w))?;
    let scale = (m as f64).sqrt();
    let mut out = DenseMatrix::zeros(m, q);
    for c in 0..q {
        let v = eig.eigenvector(c + 1);
        let pivot = v
            .iter()
            .copied()
            .reduce(|a, b| if b.abs() > a.abs() { b } else { a })
            .unwrap_or(0.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (i, x) in v.iter().enumerate() {
            out[(i, c)] = sign * scale * x;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainResult {
    pub params: DecoderParams,
    /// Mean squared error of the returned parameters.
    pub final_loss: f64,
    pub initial_loss: f64,
    /// Loss at the start of every epoch.
    pub losses: Vec<f64>,
    pub learning_rate: f64,
    pub column_norms: Vec<f64>,
}

fn flatten(p: &DecoderParams) -> Vec<f64> {
    let mut v = p.w1_raw.as_slice().to_vec();
    v.extend_from_slice(&p.b1);
    v.extend_from_slice(p.w2.as_slice());
    v.extend_from_slice(&p.b2);
    v
}

fn unflatten(v: &[f64], spec: &ModelSpec) -> DecoderParams {
    let (h, q, p) = (spec.h, spec.q, spec.p);
    let mut at = 0;
    let mut take = |len: usize| {
        let s = v[at..at + len].to_vec();
        at += len;
        s
    };
    let w1_raw = DenseMatrix::from_vec(h, q, take(h * q)).expect("sized");
    let b1 = take(h);
    let w2 = DenseMatrix::from_vec(p, h, take(p * h)).expect("sized");
    let b2 = take(p);
    DecoderParams { w1_raw, b1, w2, b2 }
}

/// Mean squared reconstruction error of the raw decoder and its gradient
/// with respect to the flattened parameters.
fn mse_and_gradient(theta: &[f64], x: &DenseMatrix, y: &DenseMatrix, spec: &ModelSpec, grad: &mut [f64]) -> f64 {
    let (h, q, p) = (spec.h, spec.q, spec.p);
    let (w1, rest) = theta.split_at(h * q);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(p * h);
    grad.fill(0.0);
    let (gw1, grest) = grad.split_at_mut(h * q);
    let (gb1, grest) = grest.split_at_mut(h);
    let (gw2, gb2) = grest.split_at_mut(p * h);

    let m = x.rows();
    let scale = 2.0 / m as f64;
    let mut hidden = vec![0.0; h];
    let mut delta = vec![0.0; p];
    let mut back = vec![0.0; h];
    let mut loss = 0.0;
    for i in 0..m {
        let xi = x.row(i);
        for r in 0..h {
            let a: f64 = (0..q).map(|j| w1[r * q + j] * xi[j]).sum();
            hidden[r] = (a + b1[r]).tanh();
        }
        for k in 0..p {
            let o: f64 = (0..h).map(|r| w2[k * h + r] * hidden[r]).sum::<f64>() + b2[k];
            let e = o - y[(i, k)];
            loss += e * e;
            delta[k] = scale * e;
        }
        back.fill(0.0);
        for k in 0..p {
            gb2[k] += delta[k];
            for r in 0..h {
                gw2[k * h + r] += delta[k] * hidden[r];
                back[r] += w2[k * h + r] * delta[k];
            }
        }
        for r in 0..h {
            let ga = back[r] * (1.0 - hidden[r] * hidden[r]);
            gb1[r] += ga;
            for j in 0..q {
                gw1[r * q + j] += ga * xi[j];
            }
        }
    }
    loss / m as f64
}

fn initial_params(spec: &ModelSpec, seed: u64) -> DecoderParams {
    let mut rng = seed::rng(seed);
    let n1 = Normal::new(0.0, (1.0 / spec.q as f64).sqrt()).expect("positive sd");
    let n2 = Normal::new(0.0, (1.0 / spec.h as f64).sqrt()).expect("positive sd");
    let mut params = DecoderParams::zeros(spec);
    params.w1_raw.as_mut_slice().iter_mut().for_each(|v| *v = n1.sample(&mut rng));
    params.w2.as_mut_slice().iter_mut().for_each(|v| *v = n2.sample(&mut rng));
    params
}

/// One Adam run. Returns `None` if the loss stops being finite.
fn adam(
    theta0: &[f64],
    x: &DenseMatrix,
    y: &DenseMatrix,
    spec: &ModelSpec,
    cfg: &PretrainConfig,
    rate: f64,
) -> Option<(Vec<f64>, f64, Vec<f64>)> {
    let d = theta0.len();
    let mut theta = theta0.to_vec();
    let mut grad = vec![0.0; d];
    let mut m1 = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    let mut best = (theta.clone(), f64::INFINITY);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..=cfg.epochs {
        let loss = mse_and_gradient(&theta, x, y, spec, &mut grad);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        if loss < best.1 {
            best = (theta.clone(), loss);
        }
        if epoch == cfg.epochs {
            break;
        }
        losses.push(loss);
        let t = (epoch + 1) as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for k in 0..d {
            m1[k] = cfg.beta1 * m1[k] + (1.0 - cfg.beta1) * grad[k];
            m2[k] = cfg.beta2 * m2[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
            theta[k] -= rate * (m1[k] / c1) / ((m2[k] / c2).sqrt() + cfg.epsilon);
        }
    }
    Some((best.0, best.1, losses))
}

/// Fits the raw (unnormalised) decoder to `(x, y)` by full-batch Adam on
/// the mean squared error. The lowest-loss iterate is returned, so the final
/// loss never exceeds the initial one.
pub fn pretrain_decoder(
    x: &DenseMatrix,
    y: &DenseMatrix,
    spec: &ModelSpec,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainResult> {
    if x.rows() != y.rows() || x.cols() != spec.q || y.cols() != spec.p || x.rows() == 0 {
        return Err(AnchorError::InvalidConfig(format!(
            "pretraining inputs {}x{} and targets {}x{} do not match (p = {}, q = {})",
            x.rows(),
            x.cols(),
            y.rows(),
            y.cols(),
            spec.p,
            spec.q
        )));
    }
    let init = flatten(&initial_params(spec, seed));
    let mut scratch = vec![0.0; init.len()];
    let initial_loss = mse_and_gradient(&init, x, y, spec, &mut scratch);
    let mut rate = cfg.learning_rate;
    let (theta, final_loss, losses) = match adam(&init, x, y, spec, cfg, rate) {
        Some(r) => r,
        None => {
            rate /= 10.0;
            adam(&init, x, y, spec, cfg, rate).ok_or(AnchorError::NonFiniteLoss { rate })?
        }
    };
    let params = unflatten(&theta, spec);
    let column_norms = params.column_norms();
    Ok(PretrainResult {
        params,
        final_loss,
        initial_loss,
        losses,
        learning_rate: rate,
        column_norms,
    })
}

/// Fixed latent values for a subset of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub indices: Vec<usize>,
    /// `source_embedding` with column `j` multiplied by `column_norms[j]`.
    pub values: DenseMatrix,
    pub source_embedding: DenseMatrix,
    pub column_norms: Vec<f64>,
    pub pretrain_loss: f64,
    pub seed: u64,
    pub config: AnchorConfig,
}

#[derive(Serialize, Deserialize)]
struct AnchorSetFile {
    indices: Vec<usize>,
    values: Vec<Vec<f64>>,
    column_norms: Vec<f64>,
    seed: u64,
    config: AnchorConfig,
    source_embedding: Vec<Vec<f64>>,
    pretrain_loss: f64,
}

impl AnchorSet {
    pub fn fixed_latents(&self) -> Result<FixedLatents> {
        Ok(FixedLatents::new(self.indices.clone(), self.values.clone())?)
    }

    /// Fraction of the `N(N−1)/2` pairwise distances fixed by the anchors.
    pub fn pinned_distance_fraction(&self, n: usize) -> f64 {
        let a = self.indices.len() as f64;
        let n = n as f64;
        (a * (a - 1.0)) / (n * (n - 1.0))
    }

    pub fn write_json(&self, path: &Path) -> crate::Result<()> {
        let file = AnchorSetFile {
            indices: self.indices.clone(),
            values: self.values.to_rows(),
            column_norms: self.column_norms.clone(),
            seed: self.seed,
            config: self.config,
            source_embedding: self.source_embedding.to_rows(),
            pretrain_loss: self.pretrain_loss,
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &file)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> crate::Result<Self> {
        let file: AnchorSetFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let matrix = |rows: &[Vec<f64>], what: &str| -> crate::Result<DenseMatrix> {
            let cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(crate::Error::Format(format!("ragged {what} in {}", path.display())));
            }
            Ok(DenseMatrix::from_vec(rows.len(), cols, rows.concat())?)
        };
        let set = Self {
            values: matrix(&file.values, "values")?,
            source_embedding: matrix(&file.source_embedding, "source_embedding")?,
            indices: file.indices,
            column_norms: file.column_norms,
            pretrain_loss: file.pretrain_loss,
            seed: file.seed,
            config: file.config,
        };
        if set.values.rows() != set.indices.len() || set.values.cols() != set.column_norms.len() {
            return Err(crate::Error::Format(format!(
                "anchor file {} has {} indices, {}x{} values and {} column norms",
                path.display(),
                set.indices.len(),
                set.values.rows(),
                set.values.cols(),
                set.column_norms.len()
            )));
        }
        set.fixed_latents()?;
        Ok(set)
    }
}

/// Anchor selection, embedding, pretraining and rescaling in one call.
pub fn build_anchor_set(
    y: &DenseMatrix,
    spec: &ModelSpec,
    config: &AnchorConfig,
    seed: u64,
) -> Result<AnchorSet> {
    spec.validate()?;
    if y.rows() != spec.n || y.cols() != spec.p {
        return Err(AnchorError::InvalidConfig(format!(
            "data is {}x{}, model expects {}x{}",
            y.rows(),
            y.cols(),
            spec.n,
            spec.p
        )));
    }
    let lle = LLEConfig {
        target_dim: spec.q,
        ..config.lle
    };
    let indices = select_anchors(spec.n, config.n_ref, seed::derive(seed, Stream::Anchors, 0))?;
    let ysub = y.select_rows(&indices);
    let embedding = match config.scope {
        LleScope::Anchors => lle_embed(&ysub, &lle)?,
        LleScope::Full => lle_embed(y, &lle)?.select_rows(&indices),
    };
    let fit = pretrain_decoder(
        &embedding,
        &ysub,
        spec,
        &config.pretrain,
        seed::derive(seed, Stream::Anchors, 1),
    )?;
    let values = rescale(&embedding, &fit.column_norms);
    Ok(AnchorSet {
        indices,
        values,
        source_embedding: embedding,
        column_norms: fit.column_norms,
        pretrain_loss: fit.final_loss,
        seed,
        config: AnchorConfig { lle, ..*config },
    })
}

/// Multiplies column `j` of `embedding` by `norms[j]`.
pub fn rescale(embedding: &DenseMatrix, norms: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(embedding.rows(), embedding.cols(), |i, j| embedding[(i, j)] * norms[j])
}
