//! Small dense linear algebra kernels: a row-major matrix type, Cholesky
//! solves, a cyclic Jacobi symmetric eigensolver and seeded k-means.
//!
//! Everything here is sized for matrices up to a couple of thousand rows,
//! which covers the latent configurations and affinity matrices the rest of
//! the crate works with.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is not symmetric: |a[{i},{j}] - a[{j},{i}]| = {diff:e}")]
    NonSymmetric { i: usize, j: usize, diff: f64 },
    #[error("Jacobi iteration did not converge after {sweeps} sweeps (off-diagonal norm {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },
    #[error("empty input")]
    EmptyInput,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), m, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: n,
            cols: m,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · self`, computed so the result is exactly symmetric.
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for k in 0..self.rows {
                    s += self[(k, i)] * self[(k, j)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    fn check_symmetric(&self) -> Result<()> {
        if self.rows != self.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "expected a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let tol = 1e-12 * self.max_abs().max(1.0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let diff = (self[(i, j)] - self[(j, i)]).abs();
                if diff > tol || diff.is_nan() {
                    return Err(LinalgError::NonSymmetric { i, j, diff });
                }
            }
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Solves `A X = B` for symmetric positive-definite `A` by Cholesky
/// factorisation. Regularisation is left to the caller.
pub fn cholesky_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    a.check_symmetric()?;
    let n = a.rows();
    if b.rows() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "A is {n}x{n} but B has {} rows",
            b.rows()
        )));
    }

    // Lower-triangular factor, A = L Lᵀ.
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }

    let m = b.cols();
    let mut x = b.clone();
    for c in 0..m {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Column `j` is the unit eigenvector for `eigenvalues[j]`.
    pub eigenvectors: DenseMatrix,
}

impl SymEigResult {
    pub fn eigenvector(&self, j: usize) -> Vec<f64> {
        self.eigenvectors.column(j)
    }
}

pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigensolver with the default sweep budget.
pub fn sym_eig(a: &DenseMatrix) -> Result<SymEigResult> {
    sym_eig_with_budget(a, JACOBI_MAX_SWEEPS)
}

pub fn sym_eig_with_budget(a: &DenseMatrix, max_sweeps: usize) -> Result<SymEigResult> {
    a.check_symmetric()?;
    let n = a.rows();
    let mut m = a.clone();
    let mut v = DenseMatrix::identity(n);
    let target = 1e-12 * a.frobenius_norm();

    let off_norm = |m: &DenseMatrix| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)] * m[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    for _ in 0..max_sweeps {
        if off_norm(&m) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    let new_kp = c * akp - s * akq;
                    let new_kq = s * akp + c * akq;
                    m[(k, p)] = new_kp;
                    m[(p, k)] = new_kp;
                    m[(k, q)] = new_kq;
                    m[(q, k)] = new_kq;
                }
                m[(p, p)] -= t * apq;
                m[(q, q)] += t * apq;
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;

                for k in 0..n {
                    let row = v.row_mut(k);
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let off = off_norm(&m);
        if off > target {
            return Err(LinalgError::NoConvergence {
                sweeps: max_sweeps,
                off,
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let eigenvalues = order.iter().map(|&i| m[(i, i)]).collect();
    let eigenvectors = DenseMatrix::from_fn(n, n, |k, j| v[(k, order[j])]);
    Ok(SymEigResult {
        eigenvalues,
        eigenvectors,
    })
}

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_RESTARTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares.
    pub inertia: f64,
}

/// k-means with k-means++ seeding, best of [`KMEANS_RESTARTS`] runs.
/// Deterministic for a given seed.
pub fn kmeans(points: &DenseMatrix, k: usize, seed: u64) -> Result<KMeansResult> {
    if points.rows() == 0 || k == 0 {
        return Err(LinalgError::EmptyInput);
    }
    if k > points.rows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "k = {k} exceeds the number of points ({})",
            points.rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..KMEANS_RESTARTS {
        let centers = kmeans_pp_init(points, k, &mut rng);
        let (labels, history) = lloyd(points, centers, KMEANS_MAX_ITER);
        let inertia = *history.last().expect("at least one objective value");
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeansResult { labels, inertia });
        }
    }
    Ok(best.expect("at least one restart"))
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp_init(points: &DenseMatrix, k: usize, rng: &mut impl Rng) -> DenseMatrix {
    let n = points.rows();
    let mut centers = DenseMatrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centers.row(c)));
        }
    }
    centers
}

/// Lloyd iterations from the given centres. Returns the final labels and the
/// objective after every assignment step.
pub(crate) fn lloyd(
    points: &DenseMatrix,
    mut centers: DenseMatrix,
    max_iter: usize,
) -> (Vec<usize>, Vec<f64>) {
    let n = points.rows();
    let k = centers.rows();
    let d = points.cols();
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..max_iter {
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..n {
            let (best, dist) = (0..k)
                .map(|c| (c, sq_dist(points.row(i), centers.row(c))))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            inertia += dist;
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }

        let mut sums = DenseMatrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, &x) in sums.row_mut(labels[i]).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centre
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (ctr, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *ctr = s * inv;
                }
            }
        }
    }
    (labels, history)
}
