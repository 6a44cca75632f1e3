//! Command-line front end: `simulate`, `anchors`, `sample`, `analyze` and
//! `pipeline`. Settings resolve as defaults < preset < JSON config < flags,
//! and every output directory receives a `run.json` with the resolved
//! configuration.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{
    cluster_draws, coclustering, dahl_least_squares, distance_error, distance_trace,
    effective_sample_size, pairwise_distances, random_pairs, split_rhat, DistanceMatrix,
};
use crate::anchors::{build_anchor_set, AnchorConfig, AnchorSet, LleScope};
use crate::data::{
    geodesic_distances, load_csv, preset, read_matrix_csv, simulate_hypersphere,
    write_matrix_csv, Dataset, LoadOptions, RunConfig,
};
use crate::linalg::DenseMatrix;
use crate::model::{FixedLatents, Layout, LatentPosterior, LatentPrior, ModelOptions, ModelSpec};
use crate::sampler::{read_trace_csv, run_chains};
use crate::seed::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "anchored-lvm", version, about = "Anchored Bayesian latent-variable model with an MLP decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate noisy observations on the unit sphere.
    Simulate(SimulateCmd),
    /// Build anchor points from a dataset.
    Anchors(AnchorsCmd),
    /// Sample the (optionally anchored) posterior with NUTS.
    Sample(SampleCmd),
    /// Summarise sampled traces: distances, R-hat, errors, clustering.
    Analyze(AnalyzeCmd),
    /// Run every stage in sequence.
    Pipeline(PipelineCmd),
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset: sphere, sphere-120, ecoli, knowledge, banknote.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub label_column: Option<String>,
    /// Column to ignore; repeatable.
    #[arg(long = "drop-column")]
    pub drop_columns: Vec<String>,
    /// Scale columns to unit variance (default for input files).
    #[arg(long, conflicts_with = "no_standardize")]
    pub standardize: bool,
    #[arg(long)]
    pub no_standardize: bool,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub h: Option<usize>,
    /// Use the raw first layer instead of normalised columns.
    #[arg(long)]
    pub no_constraint: bool,
    /// Improper flat prior on free latents instead of N(0, I).
    #[arg(long)]
    pub flat_latent_prior: bool,
}

#[derive(Debug, Args, Default)]
pub struct AnchorArgs {
    #[arg(long)]
    pub n_ref: Option<usize>,
    #[arg(long, value_enum)]
    pub lle_scope: Option<ScopeArg>,
    #[arg(long)]
    pub neighbors: Option<usize>,
    /// Pretraining epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ScopeArg {
    Anchors,
    Full,
}

#[derive(Debug, Args, Default)]
pub struct SamplerArgs {
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub target_accept: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct AnalysisArgs {
    /// Number of random free pairs to trace.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Cluster count; defaults to the number of classes when labels exist.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Cluster every n-th draw.
    #[arg(long)]
    pub thin: Option<usize>,
    /// Great-circle instead of chordal truth distances.
    #[arg(long)]
    pub geodesic: bool,
}

#[derive(Debug, Args, Default)]
pub struct SimArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateCmd {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub sim: SimArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnchorsCmd {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub anchors: AnchorArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleCmd {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Anchor set written by the `anchors` command.
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeCmd {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    /// Output directory of the `sample` command.
    #[arg(long)]
    pub traces: PathBuf,
    /// CSV of noiseless points defining the true distances.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineCmd {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub sim: SimArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub anchors: AnchorArgs,
    /// Sample without anchor points.
    #[arg(long, conflicts_with = "n_ref")]
    pub no_anchors: bool,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let file: Option<Value> = match &self.config {
            Some(p) => {
                let f = File::open(p)
                    .map_err(|e| Error::Config(format!("cannot open config {}: {e}", p.display())))?;
                Some(serde_json::from_reader(BufReader::new(f))
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)
            }
            None => None,
        };
        let name = self
            .preset
            .clone()
            .or_else(|| file.as_ref()?.get("preset")?.as_str().map(str::to_string));
        let base = match &name {
            Some(n) => preset(n).ok_or_else(|| Error::Config(format!("unknown preset {n:?}")))?,
            None => RunConfig::default(),
        };
        let mut value = serde_json::to_value(base)?;
        if let Some(f) = file {
            merge(&mut value, f);
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
        if let Some(n) = name {
            cfg.preset = Some(n);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(l) = &self.label_column {
            cfg.label_column = Some(l.clone());
        }
        if !self.drop_columns.is_empty() {
            cfg.drop_columns = self.drop_columns.clone();
        }
        if self.standardize {
            cfg.standardize = Some(true);
        }
        if self.no_standardize {
            cfg.standardize = Some(false);
        }
    }
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(q) = self.q {
            cfg.q = q;
        }
        if let Some(h) = self.h {
            cfg.h = h;
        }
        if self.no_constraint {
            cfg.constrained = false;
        }
        if self.flat_latent_prior {
            cfg.latent_prior = LatentPrior::Flat;
        }
    }
}

impl AnchorArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(r) = self.n_ref {
            cfg.n_ref = Some(r);
        }
        if let Some(s) = self.lle_scope {
            cfg.lle_scope = match s {
                ScopeArg::Anchors => LleScope::Anchors,
                ScopeArg::Full => LleScope::Full,
            };
        }
        if let Some(k) = self.neighbors {
            cfg.lle.n_neighbors = k;
        }
        if let Some(e) = self.epochs {
            cfg.pretrain.epochs = e;
        }
    }
}

impl SamplerArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.sampler;
        if let Some(v) = self.chains {
            s.chains = v;
        }
        if let Some(v) = self.warmup {
            s.warmup_iters = v;
        }
        if let Some(v) = self.iters {
            s.sample_iters = v;
        }
        if let Some(v) = self.max_depth {
            s.max_tree_depth = v;
        }
        if let Some(v) = self.target_accept {
            s.target_accept = v;
        }
    }
}

impl AnalysisArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.pairs {
            cfg.pairs = v;
        }
        if let Some(v) = self.clusters {
            cfg.clusters = Some(v);
        }
        if let Some(v) = self.thin {
            cfg.thin = v;
        }
        if self.geodesic {
            cfg.geodesic = true;
        }
    }
}

impl SimArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(s) = self.noise_sd {
            cfg.noise_sd = s;
        }
    }
}

/// A file path together with the form recorded in `run.json`.
#[derive(Debug, Clone)]
pub struct Input {
    pub path: PathBuf,
    pub shown: String,
}

impl Input {
    pub fn given(path: &Path) -> Self {
        Self {
            path: path.to_path_buf(),
            shown: path.display().to_string(),
        }
    }

    fn within(root: &Path, rel: &str) -> Self {
        Self {
            path: root.join(rel),
            shown: rel.to_string(),
        }
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config: RunConfig,
    #[serde(default)]
    pub spec: Option<ModelSpec>,
    #[serde(default)]
    pub provenance: Option<String>,
    #[serde(default)]
    pub anchors: Option<String>,
    #[serde(default)]
    pub truth: Option<String>,
    #[serde(default)]
    pub traces: Option<String>,
}

impl RunRecord {
    fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            config: config.clone(),
            spec: None,
            provenance: None,
            anchors: None,
            truth: None,
            traces: None,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("run.json"), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("run.json");
        Ok(serde_json::from_reader(BufReader::new(File::open(&path).map_err(|e| {
            Error::Config(format!("cannot open {}: {e}", path.display()))
        })?))?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn load_dataset(cfg: &RunConfig, data: &Input) -> Result<Dataset> {
    let opts = LoadOptions {
        label_column: cfg.label_column.clone(),
        drop_columns: cfg.drop_columns.clone(),
        standardize: cfg.standardize.unwrap_or(true),
    };
    let mut d = load_csv(&data.path, &opts)?;
    d.provenance = format!(
        "{} ({})",
        data.shown,
        if opts.standardize { "centred, standardised" } else { "centred" }
    );
    Ok(d)
}

fn recorded(cfg: &RunConfig, data: Option<&Input>) -> RunConfig {
    RunConfig {
        data: data.map(|d| PathBuf::from(&d.shown)),
        ..cfg.clone()
    }
}

/// Writes `data.csv`, `truth.csv` and `run.json` into `out`.
pub fn simulate_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let sim = simulate_hypersphere(cfg.n, cfg.noise_sd, seed::derive(cfg.seed, Stream::Simulate, 0))?;
    sim.dataset.write_csv(&out.join("data.csv"))?;
    write_matrix_csv(&out.join("truth.csv"), &sim.dataset.columns, &sim.truth)?;
    let mut rec = RunRecord::new("simulate", &recorded(cfg, None));
    rec.provenance = Some(sim.dataset.provenance.clone());
    rec.write(out)
}

/// Builds an anchor set and writes `anchors.json` and `run.json` into `out`.
pub fn anchors_stage(cfg: &RunConfig, data: &Input, out: &Path) -> Result<AnchorSet> {
    cfg.validate()?;
    require_file(&data.path, "data file")?;
    let n_ref = cfg
        .n_ref
        .ok_or_else(|| Error::Config("anchors need n_ref (flag --n-ref or a preset)".into()))?;
    let ds = load_dataset(cfg, data)?;
    cfg.validate_for(ds.n(), ds.p())?;
    let spec = cfg.model_spec(ds.p(), ds.n())?;
    fs::create_dir_all(out)?;
    let acfg = AnchorConfig {
        n_ref,
        lle: cfg.lle,
        pretrain: cfg.pretrain,
        scope: cfg.lle_scope,
    };
    let set = build_anchor_set(&ds.y, &spec, &acfg, cfg.seed)?;
    set.write_json(&out.join("anchors.json"))?;
    let mut rec = RunRecord::new("anchors", &recorded(cfg, Some(data)));
    rec.spec = Some(spec);
    rec.provenance = Some(ds.provenance);
    rec.write(out)?;
    Ok(set)
}

/// Runs the chains and writes per-chain traces, stats sidecars, a copy of
/// the anchor set and `run.json` into `out`.
pub fn sample_stage(cfg: &RunConfig, data: &Input, anchors: Option<&Input>, out: &Path) -> Result<()> {
    cfg.validate()?;
    require_file(&data.path, "data file")?;
    if let Some(a) = anchors {
        require_file(&a.path, "anchor file")?;
    }
    let ds = load_dataset(cfg, data)?;
    cfg.validate_for(ds.n(), ds.p())?;
    let spec = cfg.model_spec(ds.p(), ds.n())?;
    let set = anchors.map(|a| AnchorSet::read_json(&a.path)).transpose()?;
    let fixed = match &set {
        Some(s) => {
            if s.values.cols() != spec.q || s.indices.iter().any(|&i| i >= spec.n) {
                return Err(Error::Config(format!(
                    "anchor set ({} columns, largest index {:?}) does not fit q = {}, N = {}",
                    s.values.cols(),
                    s.indices.last(),
                    spec.q,
                    spec.n
                )));
            }
            Some(s.fixed_latents()?)
        }
        None => None,
    };
    let options = ModelOptions {
        constrained: cfg.constrained,
        latent_prior: cfg.latent_prior,
        ..ModelOptions::default()
    };
    let posterior = LatentPosterior::new(ds.y.clone(), spec, fixed, options)?;
    let mut sampler = cfg.sampler;
    sampler.seed = cfg.seed;
    fs::create_dir_all(out)?;
    let traces = run_chains(&posterior, &sampler, None)?;
    let names = posterior.layout().coordinate_names();
    for t in &traces {
        t.write_csv(&out.join(format!("chain{}.csv", t.chain)), &names)?;
        t.write_stats_json(&out.join(format!("chain{}_stats.json", t.chain)), Some(&ds.provenance))?;
    }
    let mut rec = RunRecord::new("sample", &recorded(cfg, Some(data)));
    if let Some(s) = &set {
        s.write_json(&out.join("anchors.json"))?;
        rec.anchors = anchors.map(|a| a.shown.clone());
    }
    rec.spec = Some(spec);
    rec.provenance = Some(ds.provenance);
    rec.write(out)
}

#[derive(Serialize)]
struct PairDiagnostics {
    i: usize,
    j: usize,
    rhat: Option<f64>,
    ess: Option<f64>,
}

#[derive(Serialize)]
struct RhatReport {
    chains: usize,
    draws: usize,
    pairs: Vec<PairDiagnostics>,
    median_rhat: Option<f64>,
}

#[derive(Serialize)]
struct DahlReport {
    /// Position among the clustered draws (chain-major after thinning).
    index: usize,
    chain: usize,
    draw: usize,
    clusters: usize,
    objective: f64,
    labels: Vec<usize>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    Some(if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) })
}

/// Sampled traces re-read from a `sample` output directory.
pub struct SampledRun {
    pub record: RunRecord,
    pub layout: Layout,
    pub anchors: FixedLatents,
    pub chains: Vec<DenseMatrix>,
}

pub fn read_sampled_run(dir: &Path) -> Result<SampledRun> {
    let record = RunRecord::read(dir)?;
    let spec = record
        .spec
        .ok_or_else(|| Error::Format(format!("{}/run.json has no model spec", dir.display())))?;
    let anchor_file = dir.join("anchors.json");
    let anchors = if anchor_file.is_file() {
        AnchorSet::read_json(&anchor_file)?.fixed_latents()?
    } else {
        FixedLatents::none(spec.q)
    };
    let layout = Layout::new(spec, &anchors.indices)?;
    let names = layout.coordinate_names();
    let chains = (0..record.config.sampler.chains)
        .map(|c| {
            let path = dir.join(format!("chain{c}.csv"));
            let (header, m) = read_trace_csv(&path)?;
            if header != names {
                return Err(Error::Format(format!("{}: columns do not match the layout", path.display())));
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampledRun {
        record,
        layout,
        anchors,
        chains,
    })
}

/// Per-chain series of `(1/N)‖D⁽ᵏ⁾ − D‖`, one column per chain.
pub fn distance_error_series(run: &SampledRun, truth: &DistanceMatrix) -> Result<DenseMatrix> {
    let per_chain: Vec<Vec<f64>> = run
        .chains
        .par_iter()
        .map(|draws| {
            (0..draws.rows())
                .map(|k| {
                    let x = run.layout.latents_of(draws.row(k), &run.anchors);
                    Ok(distance_error(&pairwise_distances(&x), truth)?)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let rows = per_chain.first().map_or(0, Vec::len);
    Ok(DenseMatrix::from_fn(rows, per_chain.len(), |k, c| per_chain[c][k]))
}

/// Writes distance traces, R-hat, the error series (with a truth file) and
/// clustering summaries (when a cluster count is known) into `out`.
pub fn analyze_stage(
    cfg: &RunConfig,
    traces: &Input,
    truth: Option<&Input>,
    labels: Option<Vec<usize>>,
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    if !traces.path.is_dir() {
        return Err(Error::Config(format!("trace directory {} does not exist", traces.path.display())));
    }
    if let Some(t) = truth {
        require_file(&t.path, "truth file")?;
    }
    let run = read_sampled_run(&traces.path)?;
    let spec = *run.layout.spec();
    let n = spec.n;
    fs::create_dir_all(out)?;

    let eligible: Vec<bool> = (0..n).map(|i| run.layout.free_slot(i).is_some()).collect();
    let pairs = random_pairs(n, cfg.pairs, Some(&eligible), seed::derive(cfg.seed, Stream::Pairs, 0))?;
    let series = distance_trace(&run.chains, &run.layout, &run.anchors, &pairs)?;
    let header: Vec<String> = pairs.iter().map(|(i, j)| format!("d[{i},{j}]")).collect();
    for (c, s) in series.iter().enumerate() {
        write_matrix_csv(&out.join(format!("distances_chain{c}.csv")), &header, s)?;
    }
    let draws = run.chains.first().map_or(0, DenseMatrix::rows);
    let diagnostics: Vec<PairDiagnostics> = pairs
        .iter()
        .enumerate()
        .map(|(col, &(i, j))| {
            let per_chain: Vec<Vec<f64>> = series.iter().map(|s| s.column(col)).collect();
            PairDiagnostics {
                i,
                j,
                rhat: split_rhat(&per_chain).ok(),
                ess: effective_sample_size(&per_chain).ok(),
            }
        })
        .collect();
    let rhats: Vec<f64> = diagnostics.iter().filter_map(|d| d.rhat).collect();
    write_json(
        &out.join("rhat.json"),
        &RhatReport {
            chains: run.chains.len(),
            draws,
            median_rhat: median(&rhats),
            pairs: diagnostics,
        },
    )?;

    if let Some(t) = truth {
        let points = read_matrix_csv(&t.path)?;
        if points.rows() != n {
            return Err(Error::Config(format!("truth file has {} rows, data has {n}", points.rows())));
        }
        let d = if cfg.geodesic { geodesic_distances(&points)? } else { pairwise_distances(&points) };
        let errors = distance_error_series(&run, &d)?;
        let header: Vec<String> = (0..errors.cols()).map(|c| format!("chain{c}")).collect();
        write_matrix_csv(&out.join("distance_error.csv"), &header, &errors)?;
    }

    let k = cfg
        .clusters
        .or_else(|| labels.as_ref().map(|l| l.iter().max().map_or(1, |m| m + 1)));
    if let Some(k) = k.filter(|&k| k >= 2) {
        let mut origin = Vec::new();
        let mut latents = Vec::new();
        for (c, draws) in run.chains.iter().enumerate() {
            for d in (0..draws.rows()).step_by(cfg.thin) {
                origin.push((c, d));
                latents.push(run.layout.latents_of(draws.row(d), &run.anchors));
            }
        }
        let partitions = cluster_draws(&latents, k, cfg.seed)?;
        let (prob, mats) = coclustering(&partitions)?;
        let dahl = dahl_least_squares(&mats, &prob)?;
        let header: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        write_matrix_csv(&out.join("cocluster.csv"), &header, &prob)?;
        let (chain, draw) = origin[dahl.index];
        write_json(
            &out.join("dahl.json"),
            &DahlReport {
                index: dahl.index,
                chain,
                draw,
                clusters: k,
                objective: dahl.objectives[dahl.index],
                labels: dahl.labels.clone(),
            },
        )?;
        // heatmap row order: true class when known, otherwise the Dahl partition
        let key = labels.as_ref().unwrap_or(&dahl.labels);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (key[i], i));
        let mut w = csv::Writer::from_path(out.join("order.csv"))?;
        w.write_record(["position", "observation", "group"])?;
        for (pos, &i) in order.iter().enumerate() {
            w.write_record([pos.to_string(), i.to_string(), key[i].to_string()])?;
        }
        w.flush()?;
    }

    let mut rec = RunRecord::new("analyze", cfg);
    rec.spec = Some(spec);
    rec.provenance = run.record.provenance.clone();
    rec.traces = Some(traces.shown.clone());
    rec.truth = truth.map(|t| t.shown.clone());
    rec.write(out)
}

/// Class labels of the data behind a run, when it has a label column.
fn labels_for(cfg: &RunConfig, data: Option<&Input>) -> Result<Option<Vec<usize>>> {
    match (data, &cfg.label_column) {
        (Some(d), Some(_)) if d.path.is_file() => Ok(load_dataset(cfg, d)?.labels),
        _ => Ok(None),
    }
}

fn run_simulate(cmd: &SimulateCmd) -> Result<()> {
    let mut cfg = cmd.config.resolve()?;
    cmd.sim.apply(&mut cfg);
    simulate_stage(&cfg, &cmd.out)
}

fn data_input(cfg: &RunConfig) -> Result<Input> {
    cfg.data
        .as_deref()
        .map(Input::given)
        .ok_or_else(|| Error::Config("no data file given (--data or \"data\" in the config)".into()))
}

fn run_anchors(cmd: &AnchorsCmd) -> Result<()> {
    let mut cfg = cmd.config.resolve()?;
    cmd.data.apply(&mut cfg);
    cmd.model.apply(&mut cfg);
    cmd.anchors.apply(&mut cfg);
    let data = data_input(&cfg)?;
    let set = anchors_stage(&cfg, &data, &cmd.out)?;
    eprintln!(
        "{} anchors, pretraining loss {:.4e}, column norms {:?}",
        set.indices.len(),
        set.pretrain_loss,
        set.column_norms
    );
    Ok(())
}

fn run_sample(cmd: &SampleCmd) -> Result<()> {
    let mut cfg = cmd.config.resolve()?;
    cmd.data.apply(&mut cfg);
    cmd.model.apply(&mut cfg);
    cmd.sampler.apply(&mut cfg);
    let data = data_input(&cfg)?;
    let anchors = cmd.anchors.as_deref().map(Input::given);
    sample_stage(&cfg, &data, anchors.as_ref(), &cmd.out_dir)
}

fn run_analyze(cmd: &AnalyzeCmd) -> Result<()> {
    let mut cfg = match cmd.config.config.is_some() || cmd.config.preset.is_some() {
        true => cmd.config.resolve()?,
        // without an explicit config, start from the one the traces were sampled with
        false => {
            let mut c = RunRecord::read(&cmd.traces)?.config;
            if let Some(s) = cmd.config.seed {
                c.seed = s;
            }
            c
        }
    };
    cmd.analysis.apply(&mut cfg);
    let traces = Input::given(&cmd.traces);
    let truth = cmd.truth.as_deref().map(Input::given);
    let data = cfg.data.as_deref().map(Input::given);
    let labels = if cfg.clusters.is_none() { labels_for(&cfg, data.as_ref())? } else { None };
    analyze_stage(&cfg, &traces, truth.as_ref(), labels, &cmd.out_dir)
}

fn run_pipeline(cmd: &PipelineCmd) -> Result<()> {
    let mut cfg = cmd.config.resolve()?;
    cmd.data.apply(&mut cfg);
    cmd.sim.apply(&mut cfg);
    cmd.model.apply(&mut cfg);
    cmd.anchors.apply(&mut cfg);
    cmd.sampler.apply(&mut cfg);
    cmd.analysis.apply(&mut cfg);
    if cmd.no_anchors {
        cfg.n_ref = None;
    }
    cfg.validate()?;
    let root = &cmd.out_dir;
    fs::create_dir_all(root)?;

    let (data, truth) = match cfg.data.as_deref() {
        Some(p) => {
            require_file(p, "data file")?;
            (Input::given(p), None)
        }
        None => {
            cfg.standardize.get_or_insert(false);
            simulate_stage(&cfg, &root.join("data"))?;
            (Input::within(root, "data/data.csv"), Some(Input::within(root, "data/truth.csv")))
        }
    };
    let anchors = match cfg.n_ref {
        Some(_) => {
            anchors_stage(&cfg, &data, &root.join("anchors"))?;
            Some(Input::within(root, "anchors/anchors.json"))
        }
        None => None,
    };
    sample_stage(&cfg, &data, anchors.as_ref(), &root.join("sample"))?;
    let labels = if cfg.clusters.is_none() { labels_for(&cfg, Some(&data))? } else { None };
    let cfg = recorded(&cfg, Some(&data));
    analyze_stage(&cfg, &Input::within(root, "sample"), truth.as_ref(), labels, &root.join("analysis"))?;
    let mut rec = RunRecord::new("pipeline", &cfg);
    rec.truth = truth.map(|t| t.shown);
    rec.anchors = anchors.map(|a| a.shown);
    rec.write(root)
}

/// Usage problems exit with 1, everything else with 2.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(c) => run_simulate(c),
        Command::Anchors(c) => run_anchors(c),
        Command::Sample(c) => run_sample(c),
        Command::Analyze(c) => run_analyze(c),
        Command::Pipeline(c) => run_pipeline(c),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            if code == 1 {
                eprintln!("usage error: {e}");
            } else {
                eprintln!("error: {e}");
            }
            code
        }
    }
}

pub fn main() -> i32 {
    main_with(std::env::args_os())
}
