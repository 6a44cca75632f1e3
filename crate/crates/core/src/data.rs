//! Datasets: the noisy-sphere simulation, CSV ingestion with centring and
//! optional standardisation, and run configurations with named presets.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{pairwise_distances, DistanceMatrix};
use crate::anchors::{LLEConfig, LleScope, PretrainConfig};
use crate::linalg::DenseMatrix;
use crate::model::{LatentPrior, ModelSpec};
use crate::sampler::NutsConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DenseMatrix,
    /// Dense codes in `0..class_names.len()`.
    pub labels: Option<Vec<usize>>,
    pub class_names: Vec<String>,
    pub columns: Vec<String>,
    pub provenance: String,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.rows()
    }

    pub fn p(&self) -> usize {
        self.y.cols()
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|_| self.class_names.len())
    }

    /// Writes the observations, plus a trailing `label` column when labelled.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.columns.clone();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.y.row(i).iter().map(f64::to_string).collect();
            if let Some(l) = &self.labels {
                rec.push(self.class_names[l[i]].clone());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Output of [`simulate_hypersphere`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSphere {
    pub dataset: Dataset,
    /// Noiseless points on the unit sphere.
    pub truth: DenseMatrix,
}

impl SimulatedSphere {
    /// Chordal distances between the noiseless points.
    pub fn true_distances(&self) -> DistanceMatrix {
        pairwise_distances(&self.truth)
    }
}

/// Great-circle distances between rows of unit-norm points.
pub fn geodesic_distances(points: &DenseMatrix) -> Result<DistanceMatrix> {
    let n = points.rows();
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = points.row(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut d = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            let v = c.clamp(-1.0, 1.0).acos();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(DistanceMatrix::from_matrix(d)?)
}

/// `n` uniform points on the unit sphere in ℝ³ with i.i.d. `N(0, noise_sd²)`
/// noise added to every coordinate.
pub fn simulate_hypersphere(n: usize, noise_sd: f64, seed: u64) -> Result<SimulatedSphere> {
    if n == 0 || !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(Error::Config(format!(
            "need n >= 1 and a finite noise_sd >= 0, got n = {n}, noise_sd = {noise_sd}"
        )));
    }
    let mut rng = crate::seed::rng(seed);
    let noise = Normal::new(0.0, noise_sd).expect("finite non-negative sd");
    let mut truth = DenseMatrix::zeros(n, 3);
    let mut y = DenseMatrix::zeros(n, 3);
    for i in 0..n {
        let v: [f64; 3] = loop {
            let v = [0; 3].map(|_| StandardNormal.sample(&mut rng));
            if v.iter().any(|c: &f64| *c != 0.0) {
                break v;
            }
        };
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        for c in 0..3 {
            truth[(i, c)] = v[c] / norm;
        }
        for c in 0..3 {
            y[(i, c)] = truth[(i, c)] + noise.sample(&mut rng);
        }
    }
    Ok(SimulatedSphere {
        dataset: Dataset {
            y,
            labels: None,
            class_names: Vec::new(),
            columns: vec!["y1".into(), "y2".into(), "y3".into()],
            provenance: format!("simulated sphere: n = {n}, noise_sd = {noise_sd}, seed = {seed}"),
        },
        truth,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadOptions {
    pub label_column: Option<String>,
    /// Columns ignored entirely, such as identifiers.
    pub drop_columns: Vec<String>,
    pub standardize: bool,
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "?" | "NA" | "NaN" | "nan")
}

/// Reads a headed, comma-separated file of numeric attributes. Columns are
/// always centred; with `standardize` they are also scaled to unit
/// (population) variance. Row numbers in errors are file lines.
pub fn load_csv(path: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(BufReader::new(File::open(path)?));
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("{}: no column named {name:?}", path.display())))
    };
    let label_idx = opts.label_column.as_deref().map(find).transpose()?;
    let dropped: Vec<usize> = opts.drop_columns.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let features: Vec<usize> = (0..header.len())
        .filter(|c| Some(*c) != label_idx && !dropped.contains(c))
        .collect();
    if features.is_empty() {
        return Err(Error::Config(format!("{}: no numeric columns left", path.display())));
    }

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    let mut rows = 0;
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = k + 2;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: rec.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        for &c in &features {
            let field = &rec[c];
            if is_missing(field) {
                return Err(Error::MissingValue { row, column: c + 1 });
            }
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("non-finite value {field:?}"),
                });
            }
            values.push(v);
        }
        if let Some(c) = label_idx {
            if is_missing(&rec[c]) {
                return Err(Error::MissingValue { row, column: c + 1 });
            }
            raw_labels.push(rec[c].to_string());
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    let mut y = DenseMatrix::from_vec(rows, features.len(), values)?;
    center_columns(&mut y, opts.standardize);

    let (labels, class_names) = if label_idx.is_some() {
        let names: Vec<String> = raw_labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let codes = raw_labels
            .iter()
            .map(|l| names.binary_search(l).expect("label in its own set"))
            .collect();
        (Some(codes), names)
    } else {
        (None, Vec::new())
    };
    Ok(Dataset {
        y,
        labels,
        class_names,
        columns: features.iter().map(|&c| header[c].clone()).collect(),
        provenance: format!(
            "{} (centred{})",
            path.display(),
            if opts.standardize { ", standardised" } else { "" }
        ),
    })
}

/// Subtracts column means and, optionally, divides by the population
/// standard deviation. Constant columns are only centred.
pub fn center_columns(y: &mut DenseMatrix, standardize: bool) {
    let (n, p) = (y.rows(), y.cols());
    for c in 0..p {
        let mean = (0..n).map(|i| y[(i, c)]).sum::<f64>() / n as f64;
        for i in 0..n {
            y[(i, c)] -= mean;
        }
        if standardize {
            let sd = ((0..n).map(|i| y[(i, c)] * y[(i, c)]).sum::<f64>() / n as f64).sqrt();
            if sd > 0.0 {
                for i in 0..n {
                    y[(i, c)] /= sd;
                }
            }
        }
    }
}

/// Reads a headed numeric CSV into a matrix.
pub fn read_matrix_csv(path: &Path) -> Result<DenseMatrix> {
    let (_, m) = crate::sampler::read_trace_csv(path)?;
    Ok(m)
}

pub fn write_matrix_csv(path: &Path, header: &[String], m: &DenseMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

/// Every knob of a run. Fields left `None` are resolved from the data or
/// the command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub data: Option<PathBuf>,
    pub label_column: Option<String>,
    pub drop_columns: Vec<String>,
    /// Defaults to on for files and off for simulated data.
    pub standardize: Option<bool>,
    pub n: usize,
    pub noise_sd: f64,
    pub q: usize,
    pub h: usize,
    /// `None` runs without anchors.
    pub n_ref: Option<usize>,
    pub constrained: bool,
    pub latent_prior: LatentPrior,
    pub lle: LLEConfig,
    pub lle_scope: LleScope,
    pub pretrain: PretrainConfig,
    pub sampler: NutsConfig,
    pub pairs: usize,
    /// Cluster count; defaults to the number of classes when labels exist.
    pub clusters: Option<usize>,
    pub thin: usize,
    pub geodesic: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            data: None,
            label_column: None,
            drop_columns: Vec::new(),
            standardize: None,
            n: 640,
            noise_sd: 0.05,
            q: 2,
            h: 10,
            n_ref: None,
            constrained: true,
            latent_prior: LatentPrior::StandardNormal,
            lle: LLEConfig::default(),
            lle_scope: LleScope::Anchors,
            pretrain: PretrainConfig::default(),
            sampler: NutsConfig::default(),
            pairs: 6,
            clusters: None,
            thin: 1,
            geodesic: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn model_spec(&self, p: usize, n: usize) -> Result<ModelSpec> {
        let spec = ModelSpec { p, q: self.q, h: self.h, n };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.h == 0 {
            return Err(Error::Config("q and h must be at least 1".into()));
        }
        if self.n_ref == Some(0) {
            return Err(Error::Config("n_ref must be positive; omit it to run without anchors".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.clusters.is_some_and(|k| k < 2) {
            return Err(Error::Config("clusters must be at least 2".into()));
        }
        self.sampler.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Checks the parts that depend on the data dimensions.
    pub fn validate_for(&self, n: usize, p: usize) -> Result<()> {
        self.validate()?;
        if self.q >= p {
            return Err(Error::Config(format!("q = {} must be below the data dimension {p}", self.q)));
        }
        if let Some(r) = self.n_ref {
            if r >= n {
                return Err(Error::Config(format!("n_ref = {r} must be below N = {n}")));
            }
        }
        Ok(())
    }
}

/// Built-in named configurations, looked up by [`preset`].
pub fn all_presets() -> Vec<(&'static str, RunConfig)> {
    let base = RunConfig::default();
    let uci = |q, h, n_ref, label: &str| RunConfig {
        q,
        h,
        n_ref: Some(n_ref),
        standardize: Some(true),
        label_column: Some(label.into()),
        ..base.clone()
    };
    let sphere = |n_ref| RunConfig {
        q: 2,
        h: 10,
        n_ref: Some(n_ref),
        standardize: Some(false),
        n: 640,
        ..base.clone()
    };
    let named = |name: &str, cfg: RunConfig| RunConfig {
        preset: Some(name.into()),
        ..cfg
    };
    vec![
        ("sphere", named("sphere", sphere(40))),
        ("sphere-120", named("sphere-120", sphere(120))),
        (
            "ecoli",
            named(
                "ecoli",
                RunConfig {
                    drop_columns: vec!["sequence_name".into()],
                    ..uci(1, 5, 20, "class")
                },
            ),
        ),
        ("knowledge", named("knowledge", uci(1, 10, 15, "class"))),
        ("banknote", named("banknote", uci(2, 20, 80, "class"))),
    ]
}

pub fn preset(name: &str) -> Option<RunConfig> {
    all_presets().into_iter().find(|(n, _)| *n == name).map(|(_, c)| c)
}
