//! Flat sampling coordinates and the map between them and structured state.
//!
//! Block order: `W1` (h×q, row-major), `b1`, `W2` (p×h, row-major), `b2`,
//! free latent rows (ascending observation index, q each), `log_tau_sq`,
//! `log_sigma_sq`. Anchored latent rows are not coordinates.

use std::ops::Range;

use super::{DecoderParams, FixedLatents, LatentConfiguration, ModelError, ModelSpec, VarianceParams};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    W1,
    B1,
    W2,
    B2,
    FreeLatents,
    LogTauSq,
    LogSigmaSq,
}

impl Block {
    pub const ALL: [Block; 7] = [
        Block::W1,
        Block::B1,
        Block::W2,
        Block::B2,
        Block::FreeLatents,
        Block::LogTauSq,
        Block::LogSigmaSq,
    ];
}

/// Full structured state of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: DecoderParams,
    pub latents: LatentConfiguration,
    pub variances: VarianceParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    spec: ModelSpec,
    /// Observation index of each free latent row, ascending.
    free_rows: Vec<usize>,
    /// For every observation, its slot among the free rows.
    slot: Vec<Option<usize>>,
    offsets: [usize; 8],
}

impl Layout {
    pub fn new(spec: ModelSpec, anchor_indices: &[usize]) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut anchored = vec![false; spec.n];
        for &i in anchor_indices {
            if i >= spec.n {
                return Err(ModelError::InvalidAnchors(format!(
                    "anchor index {i} out of range for N = {}",
                    spec.n
                )));
            }
            if anchored[i] {
                return Err(ModelError::InvalidAnchors(format!("duplicate anchor index {i}")));
            }
            anchored[i] = true;
        }
        let free_rows: Vec<usize> = (0..spec.n).filter(|&i| !anchored[i]).collect();
        let mut slot = vec![None; spec.n];
        for (s, &i) in free_rows.iter().enumerate() {
            slot[i] = Some(s);
        }
        let sizes = [
            spec.h * spec.q,
            spec.h,
            spec.p * spec.h,
            spec.p,
            free_rows.len() * spec.q,
            1,
            1,
        ];
        let mut offsets = [0usize; 8];
        for (k, s) in sizes.iter().enumerate() {
            offsets[k + 1] = offsets[k] + s;
        }
        Ok(Self {
            spec,
            free_rows,
            slot,
            offsets,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// `hq + h + ph + p + q(N - N_ref) + 2`.
    pub fn dim(&self) -> usize {
        self.offsets[7]
    }

    pub fn theta_dim(&self) -> usize {
        self.offsets[4]
    }

    pub fn range(&self, block: Block) -> Range<usize> {
        let k = Block::ALL.iter().position(|b| *b == block).unwrap();
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn free_rows(&self) -> &[usize] {
        &self.free_rows
    }

    pub fn n_free(&self) -> usize {
        self.free_rows.len()
    }

    /// Slot of observation `i` among the free latent rows, `None` if anchored.
    pub fn free_slot(&self, i: usize) -> Option<usize> {
        self.slot[i]
    }

    /// Coordinate index of latent `(i, j)` for a free observation `i`.
    pub fn latent_index(&self, i: usize, j: usize) -> Option<usize> {
        self.slot[i].map(|s| self.offsets[4] + s * self.spec.q + j)
    }

    pub fn log_tau_sq_index(&self) -> usize {
        self.offsets[5]
    }

    pub fn log_sigma_sq_index(&self) -> usize {
        self.offsets[6]
    }

    /// Column names for trace files, one per coordinate.
    pub fn coordinate_names(&self) -> Vec<String> {
        let ModelSpec { p, q, h, .. } = self.spec;
        let mut names = Vec::with_capacity(self.dim());
        for r in 0..h {
            for j in 0..q {
                names.push(format!("W1[{r},{j}]"));
            }
        }
        names.extend((0..h).map(|r| format!("b1[{r}]")));
        for k in 0..p {
            for r in 0..h {
                names.push(format!("W2[{k},{r}]"));
            }
        }
        names.extend((0..p).map(|k| format!("b2[{k}]")));
        for &i in &self.free_rows {
            for j in 0..q {
                names.push(format!("X[{i},{j}]"));
            }
        }
        names.push("log_tau_sq".to_string());
        names.push("log_sigma_sq".to_string());
        names
    }

    pub fn pack(&self, state: &ModelState) -> Result<Vec<f64>, ModelError> {
        let ModelSpec { p, q, h, n } = self.spec;
        let DecoderParams { w1_raw, b1, w2, b2 } = &state.params;
        if w1_raw.rows() != h || w1_raw.cols() != q || b1.len() != h {
            return Err(ModelError::DimensionMismatch("first layer shape".into()));
        }
        if w2.rows() != p || w2.cols() != h || b2.len() != p {
            return Err(ModelError::DimensionMismatch("second layer shape".into()));
        }
        let lat = &state.latents;
        if lat.x.rows() != n || lat.x.cols() != q || lat.anchored.len() != n {
            return Err(ModelError::DimensionMismatch("latent configuration shape".into()));
        }
        for i in 0..n {
            if lat.anchored[i] != self.slot[i].is_none() {
                return Err(ModelError::InvalidAnchors(format!(
                    "anchored mask disagrees with layout at observation {i}"
                )));
            }
        }
        let mut z = Vec::with_capacity(self.dim());
        z.extend_from_slice(w1_raw.as_slice());
        z.extend_from_slice(b1);
        z.extend_from_slice(w2.as_slice());
        z.extend_from_slice(b2);
        for &i in &self.free_rows {
            z.extend_from_slice(lat.x.row(i));
        }
        z.push(state.variances.log_tau_sq);
        z.push(state.variances.log_sigma_sq);
        Ok(z)
    }

    /// Rebuilds the structured state, filling anchored rows from `anchors`.
    pub fn unpack(&self, z: &[f64], anchors: &FixedLatents) -> Result<ModelState, ModelError> {
        let ModelSpec { p, q, h, n } = self.spec;
        if z.len() != self.dim() {
            return Err(ModelError::DimensionMismatch(format!(
                "coordinate vector has length {}, layout expects {}",
                z.len(),
                self.dim()
            )));
        }
        let block = |b: Block| z[self.range(b)].to_vec();
        let params = DecoderParams {
            w1_raw: DenseMatrix::from_vec(h, q, block(Block::W1)).expect("sized by layout"),
            b1: block(Block::B1),
            w2: DenseMatrix::from_vec(p, h, block(Block::W2)).expect("sized by layout"),
            b2: block(Block::B2),
        };
        let mut x = DenseMatrix::zeros(n, q);
        let mut anchored = vec![false; n];
        for (k, &i) in anchors.indices.iter().enumerate() {
            x.row_mut(i).copy_from_slice(anchors.values.row(k));
            anchored[i] = true;
        }
        let free = &z[self.range(Block::FreeLatents)];
        for (s, &i) in self.free_rows.iter().enumerate() {
            if anchored[i] {
                return Err(ModelError::InvalidAnchors(format!(
                    "observation {i} is both free and anchored"
                )));
            }
            x.row_mut(i).copy_from_slice(&free[s * q..(s + 1) * q]);
        }
        Ok(ModelState {
            params,
            latents: LatentConfiguration { x, anchored },
            variances: VarianceParams {
                log_tau_sq: z[self.log_tau_sq_index()],
                log_sigma_sq: z[self.log_sigma_sq_index()],
            },
        })
    }

    /// Full N×q latent matrix for a coordinate vector.
    pub fn latents_of(&self, z: &[f64], anchors: &FixedLatents) -> DenseMatrix {
        let q = self.spec.q;
        let mut x = DenseMatrix::zeros(self.spec.n, q);
        for (k, &i) in anchors.indices.iter().enumerate() {
            x.row_mut(i).copy_from_slice(anchors.values.row(k));
        }
        let free = &z[self.range(Block::FreeLatents)];
        for (s, &i) in self.free_rows.iter().enumerate() {
            x.row_mut(i).copy_from_slice(&free[s * q..(s + 1) * q]);
        }
        x
    }
}
