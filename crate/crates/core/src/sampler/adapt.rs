//! Warmup adaptation: dual averaging of the step size and windowed
//! estimation of a diagonal inverse metric.

use rand::Rng;

use super::hmc::{leapfrog, MassMatrix, PhasePoint, Position};
use super::{LogDensity, SamplerError};

pub const INIT_BUFFER: usize = 75;
pub const TERM_BUFFER: usize = 50;
pub const BASE_WINDOW: usize = 25;
pub const MIN_WARMUP: usize = INIT_BUFFER + TERM_BUFFER + BASE_WINDOW;
pub const MIN_STEP_SIZE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct DualAveraging {
    target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    mu: f64,
    counter: f64,
    h_bar: f64,
    log_step: f64,
    log_step_bar: f64,
}

impl DualAveraging {
    pub fn new(target: f64, initial_step: f64) -> Self {
        let mut da = Self {
            target,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            mu: 0.0,
            counter: 0.0,
            h_bar: 0.0,
            log_step: 0.0,
            log_step_bar: 0.0,
        };
        da.restart(initial_step);
        da
    }

    pub fn restart(&mut self, step: f64) {
        self.mu = (10.0 * step).ln();
        self.counter = 0.0;
        self.h_bar = 0.0;
        self.log_step = step.ln();
        self.log_step_bar = 0.0;
    }

    pub fn update(&mut self, accept_stat: f64) {
        self.counter += 1.0;
        let t = self.counter;
        let eta = 1.0 / (t + self.t0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_stat);
        self.log_step = self.mu - t.sqrt() / self.gamma * self.h_bar;
        let w = t.powf(-self.kappa);
        self.log_step_bar = w * self.log_step + (1.0 - w) * self.log_step_bar;
    }

    pub fn current(&self) -> f64 {
        self.log_step.exp()
    }

    /// Averaged iterate, used once warmup ends.
    pub fn averaged(&self) -> f64 {
        self.log_step_bar.exp()
    }
}

/// Welford accumulator for per-coordinate variances.
#[derive(Debug, Clone)]
pub struct VarianceEstimator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VarianceEstimator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn add(&mut self, z: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(z) {
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Sample variances shrunk towards `target` with weight `5/(n+5)`.
    pub fn regularized(&self, target: f64) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = if self.n > 1 { s / (n - 1.0) } else { 0.0 };
                (n / (n + 5.0)) * var + target * (5.0 / (n + 5.0))
            })
            .collect()
    }

    pub fn reset(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Iteration indices (exclusive) at which slow metric windows close: a 75
/// iteration fast buffer, doubling windows starting at 25, a 50 iteration
/// terminal buffer. The last window absorbs any remainder.
pub fn window_ends(warmup: usize) -> Result<Vec<usize>, SamplerError> {
    if warmup < MIN_WARMUP {
        return Err(SamplerError::WarmupTooShort {
            warmup,
            minimum: MIN_WARMUP,
        });
    }
    let end_slow = warmup - TERM_BUFFER;
    let mut ends = Vec::new();
    let mut start = INIT_BUFFER;
    let mut size = BASE_WINDOW;
    while start < end_slow {
        let mut end = start + size;
        if end + 2 * size > end_slow {
            end = end_slow;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    Ok(ends)
}

/// Heuristic initial step: double or halve until a single leapfrog step's
/// acceptance crosses 0.8.
pub fn find_reasonable_step_size<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    position: &Position,
    initial: f64,
    mass: &MassMatrix,
    rng: &mut R,
) -> Result<f64, SamplerError> {
    let threshold = 0.8_f64.ln();
    let mut step = initial;
    let mut direction = 0i32;
    loop {
        let start = PhasePoint {
            position: position.clone(),
            momentum: mass.sample_momentum(rng),
        };
        let h0 = start.hamiltonian(mass);
        let end = leapfrog(target, &start, step, mass);
        let delta = h0 - end.hamiltonian(mass);
        let accept_high = delta > threshold;
        if direction == 0 {
            direction = if accept_high { 1 } else { -1 };
        } else if (direction == 1 && !accept_high) || (direction == -1 && accept_high) {
            return Ok(step);
        }
        if direction == 1 {
            step *= 2.0;
            if step > 1e7 {
                return Ok(step);
            }
        } else {
            step *= 0.5;
            if step < MIN_STEP_SIZE {
                return Err(SamplerError::AdaptationFailed { step });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_follow_doubling_schedule() {
        assert_eq!(window_ends(1000).unwrap(), vec![100, 150, 250, 450, 950]);
        assert_eq!(window_ends(500).unwrap(), vec![100, 150, 250, 450]);
        assert_eq!(window_ends(150).unwrap(), vec![100]);
        assert!(matches!(window_ends(149), Err(SamplerError::WarmupTooShort { .. })));
    }

    #[test]
    fn dual_averaging_moves_towards_target() {
        let mut da = DualAveraging::new(0.8, 1.0);
        for _ in 0..50 {
            da.update(0.2);
        }
        assert!(da.current() < 1.0);
        let mut da = DualAveraging::new(0.8, 1.0);
        for _ in 0..50 {
            da.update(1.0);
        }
        assert!(da.current() > 1.0);
    }

    #[test]
    fn variance_estimator_regularizes() {
        let mut est = VarianceEstimator::new(1);
        for x in [1.0, 2.0, 3.0, 4.0, 5.0] {
            est.add(&[x]);
        }
        // var = 2.5, n = 5: 0.5 * 2.5 + 0.5 * 1
        assert!((est.regularized(1.0)[0] - 1.75).abs() < 1e-15);
    }
}
