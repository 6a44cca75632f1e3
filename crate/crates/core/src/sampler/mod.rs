//! Hamiltonian Monte Carlo with No-U-Turn trajectories, Stan-style warmup
//! adaptation and an independent-chains driver.

mod adapt;
mod hmc;
mod nuts;
mod trace;

pub use adapt::{
    find_reasonable_step_size, window_ends, DualAveraging, VarianceEstimator, MIN_STEP_SIZE,
    MIN_WARMUP,
};
pub use hmc::{leapfrog, MassMatrix, PhasePoint, Position};
pub use nuts::{nuts_step, TransitionStats, DIVERGENCE_THRESHOLD};
pub use trace::{read_trace_csv, ChainSummary, ChainTrace};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::seed::{self, Stream};

/// A differentiable log-density on ℝᵈ.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Returns `log p(z)` and overwrites `grad` with its gradient. Points
    /// outside the support return `-inf`.
    fn log_density_and_gradient(&self, z: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SamplerError {
    #[error("warmup of {warmup} iterations is shorter than the minimum of {minimum}")]
    WarmupTooShort { warmup: usize, minimum: usize },
    #[error("step size collapsed to {step:e} during adaptation")]
    AdaptationFailed { step: f64 },
    #[error("no finite starting point found after {attempts} attempts")]
    InitializationFailed { attempts: usize },
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
}

pub const INIT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NutsConfig {
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub warmup_iters: usize,
    pub sample_iters: usize,
    pub chains: usize,
    /// Random inits are uniform on `(-init_scale, init_scale)` per coordinate.
    pub init_scale: f64,
    /// Value the adapted inverse metric is shrunk towards.
    pub mass_regularization_target: f64,
    pub seed: u64,
}

impl Default for NutsConfig {
    fn default() -> Self {
        Self {
            target_accept: 0.8,
            max_tree_depth: 10,
            warmup_iters: 1000,
            sample_iters: 1000,
            chains: 4,
            init_scale: 2.0,
            mass_regularization_target: 1.0,
            seed: 0,
        }
    }
}

impl NutsConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SamplerError::InvalidConfig(format!(
                "target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if self.max_tree_depth == 0 || self.max_tree_depth > 14 {
            return Err(SamplerError::InvalidConfig(format!(
                "max_tree_depth must lie in 1..=14, got {}",
                self.max_tree_depth
            )));
        }
        if self.chains == 0 {
            return Err(SamplerError::InvalidConfig("need at least one chain".into()));
        }
        if !(self.init_scale >= 0.0) || !(self.mass_regularization_target > 0.0) {
            return Err(SamplerError::InvalidConfig(
                "init_scale must be >= 0 and the metric regularisation target > 0".into(),
            ));
        }
        window_ends(self.warmup_iters)?;
        Ok(())
    }

    pub fn chain_seed(&self, chain: usize) -> u64 {
        seed::derive(self.seed, Stream::Chain, chain as u64)
    }
}

/// Uniform random start with a finite log-density and gradient.
pub fn random_initial_point<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    scale: f64,
    rng: &mut R,
) -> Result<Position, SamplerError> {
    for _ in 0..INIT_ATTEMPTS {
        let z: Vec<f64> = (0..target.dim())
            .map(|_| {
                if scale > 0.0 {
                    rng.random_range(-scale..scale)
                } else {
                    0.0
                }
            })
            .collect();
        let pos = Position::new(target, z);
        if pos.is_finite() {
            return Ok(pos);
        }
    }
    Err(SamplerError::InitializationFailed {
        attempts: INIT_ATTEMPTS,
    })
}

/// Runs one chain: warmup with adaptation, then `sample_iters` frozen draws.
pub fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    cfg: &NutsConfig,
    chain: usize,
    init: Option<&[f64]>,
) -> Result<ChainTrace, SamplerError> {
    cfg.validate()?;
    let chain_seed = cfg.chain_seed(chain);
    let mut rng = seed::rng(chain_seed);
    let dim = target.dim();

    let mut position = match init {
        Some(z) => {
            if z.len() != dim {
                return Err(SamplerError::InvalidConfig(format!(
                    "initial point has length {}, target dimension is {dim}",
                    z.len()
                )));
            }
            let pos = Position::new(target, z.to_vec());
            if !pos.is_finite() {
                return Err(SamplerError::InitializationFailed { attempts: 1 });
            }
            pos
        }
        None => random_initial_point(target, cfg.init_scale, &mut rng)?,
    };
    let initial = position.z.clone();

    let mut mass = MassMatrix::unit(dim);
    let mut step = find_reasonable_step_size(target, &position, 1.0, &mass, &mut rng)?;
    let mut da = DualAveraging::new(cfg.target_accept, step);
    let mut windows = window_ends(cfg.warmup_iters)?.into_iter().peekable();
    let mut variance = VarianceEstimator::new(dim);
    let mut warmup_divergences = 0;

    for it in 0..cfg.warmup_iters {
        let (next, stats) = nuts_step(target, &position, step, &mass, cfg.max_tree_depth, &mut rng);
        position = next;
        warmup_divergences += usize::from(stats.divergent);
        da.update(stats.accept_stat);
        step = da.current();

        let in_slow_phase = it >= adapt::INIT_BUFFER && it < cfg.warmup_iters - adapt::TERM_BUFFER;
        if in_slow_phase {
            variance.add(&position.z);
        }
        if windows.peek() == Some(&(it + 1)) {
            windows.next();
            mass = MassMatrix {
                inv_mass: variance.regularized(cfg.mass_regularization_target),
            };
            variance.reset();
            // Restarting after the final window leaves only the terminal
            // buffer to average over, and the restart transient then drags
            // the averaged step well below the one that hits the target.
            if windows.peek().is_some() {
                step = find_reasonable_step_size(target, &position, step, &mass, &mut rng)?;
                da.restart(step);
            }
        }
        if !(step >= MIN_STEP_SIZE) {
            return Err(SamplerError::AdaptationFailed { step });
        }
    }
    step = da.averaged();
    if !(step >= MIN_STEP_SIZE) || !step.is_finite() {
        return Err(SamplerError::AdaptationFailed { step });
    }

    let mut draws = Vec::with_capacity(cfg.sample_iters * dim);
    let mut stats = Vec::with_capacity(cfg.sample_iters);
    for _ in 0..cfg.sample_iters {
        let (next, s) = nuts_step(target, &position, step, &mass, cfg.max_tree_depth, &mut rng);
        position = next;
        draws.extend_from_slice(&position.z);
        stats.push(s);
    }

    Ok(ChainTrace {
        chain,
        seed: chain_seed,
        dim,
        draws,
        stats,
        initial,
        step_size: step,
        inv_mass: mass.inv_mass,
        warmup_divergences,
    })
}

/// Runs `cfg.chains` independent chains in parallel. Traces come back in
/// chain order regardless of scheduling.
pub fn run_chains<T: LogDensity + ?Sized>(
    target: &T,
    cfg: &NutsConfig,
    init: Option<&[f64]>,
) -> Result<Vec<ChainTrace>, SamplerError> {
    cfg.validate()?;
    (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(target, cfg, c, init))
        .collect()
}


#[cfg(test)]
mod tests;
