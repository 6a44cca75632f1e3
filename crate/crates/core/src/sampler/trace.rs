use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TransitionStats;
use crate::linalg::DenseMatrix;
use crate::Error;

/// Post-warmup draws and per-draw statistics of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub chain: usize,
    pub seed: u64,
    pub dim: usize,
    /// Row-major, `stats.len()` rows of `dim` coordinates.
    pub draws: Vec<f64>,
    pub stats: Vec<TransitionStats>,
    /// Starting point of warmup.
    pub initial: Vec<f64>,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
    pub warmup_divergences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub chain: usize,
    pub seed: u64,
    pub draws: usize,
    pub mean_accept_stat: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub mean_tree_depth: f64,
    pub max_tree_depth: usize,
    pub total_leapfrog_steps: usize,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
}

#[derive(Serialize)]
struct StatsSidecar<'a> {
    summary: ChainSummary,
    accept_stat: Vec<f64>,
    tree_depth: Vec<usize>,
    divergent: Vec<bool>,
    log_density: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<&'a str>,
}

impl ChainTrace {
    pub fn n_draws(&self) -> usize {
        self.stats.len()
    }

    pub fn draw(&self, k: usize) -> &[f64] {
        &self.draws[k * self.dim..(k + 1) * self.dim]
    }

    /// Series of coordinate `j` across draws.
    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|k| self.draws[k * self.dim + j]).collect()
    }

    pub fn draws_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_vec(self.n_draws(), self.dim, self.draws.clone())
            .expect("draws sized by dim")
    }

    pub fn divergences(&self) -> usize {
        self.stats.iter().filter(|s| s.divergent).count()
    }

    pub fn mean_accept_stat(&self) -> f64 {
        self.stats.iter().map(|s| s.accept_stat).sum::<f64>() / self.n_draws().max(1) as f64
    }

    pub fn summary(&self) -> ChainSummary {
        let n = self.n_draws().max(1) as f64;
        ChainSummary {
            chain: self.chain,
            seed: self.seed,
            draws: self.n_draws(),
            mean_accept_stat: self.mean_accept_stat(),
            divergences: self.divergences(),
            warmup_divergences: self.warmup_divergences,
            mean_tree_depth: self.stats.iter().map(|s| s.depth as f64).sum::<f64>() / n,
            max_tree_depth: self.stats.iter().map(|s| s.depth).max().unwrap_or(0),
            total_leapfrog_steps: self.stats.iter().map(|s| s.n_leapfrog).sum(),
            step_size: self.step_size,
            inv_mass: self.inv_mass.clone(),
        }
    }

    /// One row per draw under a header of coordinate names.
    pub fn write_csv(&self, path: &Path, names: &[String]) -> Result<(), Error> {
        if names.len() != self.dim {
            return Err(Error::Format(format!(
                "{} column names for {} coordinates",
                names.len(),
                self.dim
            )));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(names)?;
        let mut record = Vec::with_capacity(self.dim);
        for k in 0..self.n_draws() {
            record.clear();
            record.extend(self.draw(k).iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_stats_json(&self, path: &Path, provenance: Option<&str>) -> Result<(), Error> {
        let sidecar = StatsSidecar {
            summary: self.summary(),
            accept_stat: self.stats.iter().map(|s| s.accept_stat).collect(),
            tree_depth: self.stats.iter().map(|s| s.depth).collect(),
            divergent: self.stats.iter().map(|s| s.divergent).collect(),
            log_density: self.stats.iter().map(|s| s.log_density).collect(),
            provenance,
        };
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, &sidecar)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Reads a trace CSV back as `(column names, draws)`.
pub fn read_trace_csv(path: &Path) -> Result<(Vec<String>, DenseMatrix), Error> {
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for (col, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row: line + 2,
                column: col + 1,
                message: format!("not a number: {field:?}"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let m = DenseMatrix::from_vec(rows, names.len(), data)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((names, m))
}
