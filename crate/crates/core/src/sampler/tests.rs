use super::test_targets::{CorrelatedGaussian, ScaledGaussian, StdNormal};
use super::*;
use crate::analysis::{mcse_mean, split_rhat};

fn config(seed: u64, warmup: usize, samples: usize) -> NutsConfig {
    NutsConfig {
        warmup_iters: warmup,
        sample_iters: samples,
        seed,
        ..NutsConfig::default()
    }
}

fn per_chain(traces: &[ChainTrace], j: usize) -> Vec<Vec<f64>> {
    traces.iter().map(|t| t.coordinate(j)).collect()
}

#[test]
fn standard_normal_is_calibrated() {
    let target = StdNormal { dim: 5 };
    let traces = run_chains(&target, &config(11, 1000, 1000), None).unwrap();
    assert_eq!(traces.len(), 4);
    for j in 0..5 {
        let chains = per_chain(&traces, j);
        let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let mcse = mcse_mean(&chains).unwrap();
        assert!(mean.abs() < 3.0 * mcse, "coordinate {j}: mean {mean}, mcse {mcse}");
        let rhat = split_rhat(&chains).unwrap();
        assert!(rhat < 1.01, "coordinate {j}: rhat {rhat}");
    }
    let accept = traces.iter().map(|t| t.mean_accept_stat()).sum::<f64>() / 4.0;
    assert!((accept - 0.8).abs() <= 0.05, "accept {accept}");
    for t in &traces {
        // isotropic target: adapted metric entries within a factor of two of each other
        let lo = t.inv_mass.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.inv_mass.iter().copied().fold(0.0, f64::max);
        assert!(hi / lo < 2.0, "inverse mass {:?}", t.inv_mass);
    }
}

#[test]
fn metric_adapts_to_scales() {
    let target = ScaledGaussian {
        sd: vec![0.1, 1.0, 10.0],
    };
    let traces = run_chains(&target, &config(5, 1000, 200), None).unwrap();
    for t in &traces {
        for (m, s) in t.inv_mass.iter().zip(&target.sd) {
            let ratio = m / (s * s);
            assert!(ratio > 0.5 && ratio < 2.0, "inverse mass {m} for sd {s}");
        }
    }
}

#[test]
fn correlated_gaussian_covariance() {
    let rho = 0.9;
    let target = CorrelatedGaussian::new(rho);
    let traces = run_chains(&target, &config(3, 1000, 2000), None).unwrap();
    let draws: Vec<&[f64]> = traces.iter().flat_map(|t| (0..t.n_draws()).map(move |k| t.draw(k))).collect();
    let n = draws.len() as f64;
    let mean = [0, 1].map(|j| draws.iter().map(|d| d[j]).sum::<f64>() / n);
    let mut cov = [[0.0; 2]; 2];
    for d in &draws {
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] += (d[a] - mean[a]) * (d[b] - mean[b]) / (n - 1.0);
            }
        }
    }
    let truth = [[1.0, rho], [rho, 1.0]];
    let mut diff = 0.0;
    let mut norm = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            diff += (cov[a][b] - truth[a][b]).powi(2);
            norm += truth[a][b].powi(2);
        }
    }
    let rel = (diff / norm).sqrt();
    assert!(rel < 0.1, "relative covariance error {rel}: {cov:?}");
}

#[test]
fn adaptation_is_frozen_after_warmup() {
    let target = StdNormal { dim: 3 };
    let t = run_chain(&target, &config(2, 200, 300), 0, None).unwrap();
    assert!(t.stats.iter().all(|s| s.step_size == t.step_size));
    assert_eq!(t.n_draws(), 300);
    assert_eq!(t.draws.len(), 900);
}

#[test]
fn chains_are_reproducible_and_distinct() {
    let target = StdNormal { dim: 2 };
    let cfg = NutsConfig {
        chains: 3,
        ..config(9, 150, 50)
    };
    let a = run_chains(&target, &cfg, None).unwrap();
    let b = run_chains(&target, &cfg, None).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].initial, a[1].initial);
    assert_ne!(a[1].initial, a[2].initial);
    for (c, t) in a.iter().enumerate() {
        assert_eq!(t.chain, c);
        assert_eq!(t.seed, cfg.chain_seed(c));
    }
}

#[test]
fn explicit_initial_point_is_used() {
    let target = StdNormal { dim: 2 };
    let t = run_chain(&target, &config(1, 150, 10), 0, Some(&[0.25, -0.5])).unwrap();
    assert_eq!(t.initial, vec![0.25, -0.5]);
    assert!(matches!(
        run_chain(&target, &config(1, 150, 10), 0, Some(&[0.0])),
        Err(SamplerError::InvalidConfig(_))
    ));
}

#[test]
fn short_warmup_is_rejected() {
    let target = StdNormal { dim: 2 };
    assert!(matches!(
        run_chains(&target, &config(0, 149, 10), None),
        Err(SamplerError::WarmupTooShort { warmup: 149, .. })
    ));
}

struct NowhereFinite;

impl LogDensity for NowhereFinite {
    fn dim(&self) -> usize {
        1
    }

    fn log_density_and_gradient(&self, _z: &[f64], grad: &mut [f64]) -> f64 {
        grad[0] = 0.0;
        f64::NEG_INFINITY
    }
}

#[test]
fn initialization_failure_is_reported() {
    assert_eq!(
        run_chain(&NowhereFinite, &config(0, 150, 10), 0, None),
        Err(SamplerError::InitializationFailed {
            attempts: INIT_ATTEMPTS
        })
    );
}

