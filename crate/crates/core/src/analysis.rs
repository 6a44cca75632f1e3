//! Posterior summaries: pairwise-distance traces and errors, split-R̂ and
//! effective sample size, per-draw spectral clustering, co-clustering
//! probabilities and the least-squares clustering estimate.

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::linalg::{kmeans, sym_eig, DenseMatrix, LinalgError};
use crate::model::{FixedLatents, Layout};
use crate::seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("need at least {min_chains} chains of at least {min_draws} draws")]
    TooFewDraws { min_chains: usize, min_draws: usize },
    #[error("index {index} out of range for {n} observations")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("invalid cluster count {k} for {n} observations")]
    InvalidClusterCount { k: usize, n: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

type Result<T> = std::result::Result<T, AnalysisError>;

/// Symmetric N×N Euclidean distances with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(DenseMatrix);

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DenseMatrix {
        &self.0
    }

    /// Wraps a square matrix, checking symmetry, zero diagonal and non-negativity.
    pub fn from_matrix(m: DenseMatrix) -> Result<Self> {
        let n = m.rows();
        if m.cols() != n {
            return Err(AnalysisError::SizeMismatch(format!("{}x{} is not square", n, m.cols())));
        }
        for i in 0..n {
            if m[(i, i)] != 0.0 {
                return Err(AnalysisError::SizeMismatch(format!("nonzero diagonal at {i}")));
            }
            for j in 0..i {
                if m[(i, j)] != m[(j, i)] || !(m[(i, j)] >= 0.0) {
                    return Err(AnalysisError::SizeMismatch(format!(
                        "entry ({i},{j}) is negative or asymmetric"
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    fn off_diagonal_median(&self) -> f64 {
        let n = self.n();
        let mut v: Vec<f64> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect();
        if v.is_empty() {
            return 0.0;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len();
        if m % 2 == 1 {
            v[m / 2]
        } else {
            0.5 * (v[m / 2 - 1] + v[m / 2])
        }
    }
}

pub fn pairwise_distances(x: &DenseMatrix) -> DistanceMatrix {
    let n = x.rows();
    let mut d = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let v = s.sqrt();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    DistanceMatrix(d)
}

/// `(1/N) ‖Dₖ − D‖_F` over all N² entries.
pub fn distance_error(dk: &DistanceMatrix, d: &DistanceMatrix) -> Result<f64> {
    if dk.n() != d.n() {
        return Err(AnalysisError::SizeMismatch(format!("{} vs {} observations", dk.n(), d.n())));
    }
    let ss: f64 = dk
        .0
        .as_slice()
        .iter()
        .zip(d.0.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ss.sqrt() / d.n() as f64)
}

/// Draws `count` distinct unordered pairs of observations, optionally
/// restricted to observations for which `eligible` is true.
pub fn random_pairs(
    n: usize,
    count: usize,
    eligible: Option<&[bool]>,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let pool: Vec<usize> = match eligible {
        Some(mask) => (0..n).filter(|&i| mask[i]).collect(),
        None => (0..n).collect(),
    };
    let m = pool.len();
    let total = m * m.saturating_sub(1) / 2;
    if count > total {
        return Err(AnalysisError::SizeMismatch(format!(
            "{count} pairs requested from {m} eligible observations"
        )));
    }
    let mut rng = seed::rng(seed);
    let picks = sample(&mut rng, total, count);
    let mut pairs: Vec<(usize, usize)> = picks
        .into_iter()
        .map(|k| {
            // unrank k into (a, b) with a < b
            let mut a = 0;
            let mut rem = k;
            while rem >= m - 1 - a {
                rem -= m - 1 - a;
                a += 1;
            }
            (pool[a], pool[a + 1 + rem])
        })
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

/// For every chain, a draws × pairs matrix of latent distances
/// `‖Xⁱ − Xʲ‖`, with anchored rows taken from `anchors`.
pub fn distance_trace(
    chains: &[DenseMatrix],
    layout: &Layout,
    anchors: &FixedLatents,
    pairs: &[(usize, usize)],
) -> Result<Vec<DenseMatrix>> {
    let n = layout.spec().n;
    let q = layout.spec().q;
    for &(i, j) in pairs {
        for index in [i, j] {
            if index >= n {
                return Err(AnalysisError::IndexOutOfRange { index, n });
            }
        }
    }
    let fixed_row = |i: usize| -> &[f64] {
        let k = anchors.indices.binary_search(&i).expect("anchored observation");
        anchors.values.row(k)
    };
    chains
        .iter()
        .map(|draws| {
            if draws.cols() != layout.dim() {
                return Err(AnalysisError::SizeMismatch(format!(
                    "draws have {} columns, layout expects {}",
                    draws.cols(),
                    layout.dim()
                )));
            }
            Ok(DenseMatrix::from_fn(draws.rows(), pairs.len(), |k, c| {
                let (i, j) = pairs[c];
                let z = draws.row(k);
                let xi = match layout.latent_index(i, 0) {
                    Some(s) => &z[s..s + q],
                    None => fixed_row(i),
                };
                let xj = match layout.latent_index(j, 0) {
                    Some(s) => &z[s..s + q],
                    None => fixed_row(j),
                };
                xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            }))
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Splits every chain into two halves, dropping the middle draw of odd-length chains.
fn split_halves(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    chains
        .iter()
        .flat_map(|c| {
            let half = c.len() / 2;
            [&c[..half], &c[c.len() - half..]]
        })
        .collect()
}

fn check_chains(chains: &[Vec<f64>]) -> Result<usize> {
    let err = AnalysisError::TooFewDraws {
        min_chains: 2,
        min_draws: 4,
    };
    if chains.len() < 2 {
        return Err(err);
    }
    let n = chains[0].len();
    if n < 4 {
        return Err(err);
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(AnalysisError::SizeMismatch("chains differ in length".into()));
    }
    Ok(n)
}

/// Split-chain potential scale reduction factor.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    check_chains(chains)?;
    let halves = split_halves(chains);
    let n = halves[0].len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = mean(&halves.iter().map(|h| sample_variance(h)).collect::<Vec<_>>());
    let b = n * sample_variance(&means);
    if w == 0.0 {
        // constant within every half: agreeing halves count as mixed
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

fn autocovariance(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    (0..n - lag).map(|t| (x[t] - m) * (x[t + lag] - m)).sum::<f64>() / n as f64
}

/// Multi-chain effective sample size on split chains, using Geyer's initial
/// monotone sequence estimator.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Result<f64> {
    check_chains(chains)?;
    let halves = split_halves(chains);
    let m = halves.len() as f64;
    let n = halves[0].len();
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let acov = |lag: usize| -> f64 {
        halves
            .iter()
            .zip(&means)
            .map(|(h, &mu)| autocovariance(h, mu, lag))
            .sum::<f64>()
            / m
    };
    let w = acov(0) * nf / (nf - 1.0);
    let b_over_n = sample_variance(&means);
    let var_plus = w * (nf - 1.0) / nf + b_over_n;
    if !(var_plus > 0.0) {
        return Ok(m * nf);
    }

    let mut rho = vec![0.0; n + 1];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = 1.0 - (w - acov(1)) / var_plus;
    rho[1] = odd;
    let mut t = 1;
    while t + 5 < n && even + odd > 0.0 {
        even = 1.0 - (w - acov(t + 1)) / var_plus;
        odd = 1.0 - (w - acov(t + 2)) / var_plus;
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 {
        rho[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = 0.5 * (rho[t - 1] + rho[t]);
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = m * nf;
    let tau = -1.0 + 2.0 * rho[..=max_t].iter().sum::<f64>() + rho[max_t + 1];
    Ok((total / tau).min(total * total.log10()))
}

/// Monte Carlo standard error of the posterior mean.
pub fn mcse_mean(chains: &[Vec<f64>]) -> Result<f64> {
    let ess = effective_sample_size(chains)?;
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    Ok((sample_variance(&pooled) / ess).sqrt())
}

/// Normalised spectral clustering of one distance matrix: Gaussian affinity
/// with median-distance bandwidth, symmetric normalised Laplacian, bottom-k
/// eigenvectors with unit-length rows, then k-means.
pub fn spectral_cluster(d: &DistanceMatrix, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = d.n();
    if k < 2 || k > n {
        return Err(AnalysisError::InvalidClusterCount { k, n });
    }
    let mut ell = d.off_diagonal_median();
    if !(ell > 0.0) {
        ell = 1.0;
    }
    let scale = 1.0 / (2.0 * ell * ell);
    let mut a = DenseMatrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let v = (-d.get(i, j).powi(2) * scale).exp();
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| 1.0 / a.row(i).iter().sum::<f64>().sqrt())
        .collect();
    let mut lap = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = f64::from(u8::from(i == j)) - inv_sqrt_deg[i] * a[(i, j)] * inv_sqrt_deg[j];
            lap[(i, j)] = v;
            lap[(j, i)] = v;
        }
    }
    let eig = sym_eig(&lap)?;
    let mut emb = DenseMatrix::from_fn(n, k, |i, c| eig.eigenvectors[(i, c)]);
    for i in 0..n {
        let row = emb.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let labels = kmeans(&emb, k, seed)?.labels;
    Ok(canonical_labels(&labels))
}

/// Relabels clusters in order of first appearance.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map: Vec<(usize, usize)> = Vec::new();
    labels
        .iter()
        .map(|&l| match map.iter().find(|(from, _)| *from == l) {
            Some(&(_, to)) => to,
            None => {
                let to = map.len();
                map.push((l, to));
                to
            }
        })
        .collect()
}

/// Binary same-cluster indicator for one partition. Stored as labels;
/// entries are computed on demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusteringMatrix {
    labels: Vec<usize>,
}

impl ClusteringMatrix {
    pub fn from_labels(labels: &[usize]) -> Self {
        Self {
            labels: labels.to_vec(),
        }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        u8::from(self.labels[i] == self.labels[j])
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let n = self.n();
        DenseMatrix::from_fn(n, n, |i, j| f64::from(self.get(i, j)))
    }
}

/// Posterior mean of the clustering matrices.
pub type CoClusterProbability = DenseMatrix;

pub fn coclustering(
    partitions: &[Vec<usize>],
) -> Result<(CoClusterProbability, Vec<ClusteringMatrix>)> {
    let first = partitions.first().ok_or(AnalysisError::TooFewDraws {
        min_chains: 1,
        min_draws: 1,
    })?;
    let n = first.len();
    if partitions.iter().any(|p| p.len() != n) {
        return Err(AnalysisError::SizeMismatch("partitions differ in length".into()));
    }
    let mats: Vec<ClusteringMatrix> = partitions
        .iter()
        .map(|p| ClusteringMatrix::from_labels(p))
        .collect();
    let mut counts = vec![0u32; n * n];
    for c in &mats {
        for i in 0..n {
            for j in 0..n {
                counts[i * n + j] += u32::from(c.get(i, j));
            }
        }
    }
    let k = mats.len() as f64;
    let prob = DenseMatrix::from_vec(n, n, counts.into_iter().map(|c| f64::from(c) / k).collect())
        .expect("n*n entries");
    Ok((prob, mats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DahlSelection {
    pub index: usize,
    pub labels: Vec<usize>,
    /// `Σᵢⱼ (Cᵏᵢⱼ − P̄ᵢⱼ)²` for every draw.
    pub objectives: Vec<f64>,
}

/// Draw whose clustering matrix is closest in squared error to the
/// co-clustering probabilities; ties go to the earliest draw.
pub fn dahl_least_squares(
    mats: &[ClusteringMatrix],
    prob: &CoClusterProbability,
) -> Result<DahlSelection> {
    if mats.is_empty() {
        return Err(AnalysisError::TooFewDraws {
            min_chains: 1,
            min_draws: 1,
        });
    }
    let n = prob.rows();
    if mats.iter().any(|c| c.n() != n) || prob.cols() != n {
        return Err(AnalysisError::SizeMismatch("clustering and probability sizes differ".into()));
    }
    let objectives: Vec<f64> = mats
        .iter()
        .map(|c| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let d = f64::from(c.get(i, j)) - prob[(i, j)];
                    s += d * d;
                }
            }
            s
        })
        .collect();
    let mut index = 0;
    for (k, &v) in objectives.iter().enumerate() {
        if v < objectives[index] {
            index = k;
        }
    }
    Ok(DahlSelection {
        index,
        labels: mats[index].labels().to_vec(),
        objectives,
    })
}

/// Spectral clustering of every latent configuration, in parallel. Draw `k`
/// uses the `k`-th clustering sub-seed.
pub fn cluster_draws(latents: &[DenseMatrix], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    latents
        .par_iter()
        .enumerate()
        .map(|(idx, x)| {
            let d = pairwise_distances(x);
            spectral_cluster(&d, k, seed::derive(seed, seed::Stream::Clustering, idx as u64))
        })
        .collect()
}
