//! No-U-Turn transitions with multinomial trajectory sampling.
//!
//! Within a subtree the proposal is drawn in proportion to `exp(-H)`; when a
//! new subtree is joined at the top level the switch is biased towards the
//! new half (`min(1, W_new / W_old)`), as in Stan. With a single doubling this
//! reduces to a Metropolis-corrected leapfrog step.

use rand::Rng;

use super::hmc::{leapfrog, MassMatrix, PhasePoint, Position};
use super::LogDensity;

/// Energy error beyond which a trajectory is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionStats {
    pub log_density: f64,
    /// Number of completed doublings.
    pub depth: usize,
    pub step_size: f64,
    pub divergent: bool,
    /// Mean of `min(1, exp(H₀ - H))` over the trajectory; drives step-size adaptation.
    pub accept_stat: f64,
    pub n_leapfrog: usize,
    pub energy: f64,
}

struct Subtree {
    minus: PhasePoint,
    plus: PhasePoint,
    proposal: Position,
    log_weight: f64,
    sum_accept: f64,
    n_leapfrog: usize,
    divergent: bool,
    turning: bool,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// True once the span `[minus, plus]` starts doubling back on itself.
pub(crate) fn is_turning(minus: &PhasePoint, plus: &PhasePoint, mass: &MassMatrix) -> bool {
    let mut d_minus = 0.0;
    let mut d_plus = 0.0;
    for k in 0..mass.dim() {
        let dz = plus.position.z[k] - minus.position.z[k];
        d_minus += dz * mass.inv_mass[k] * minus.momentum[k];
        d_plus += dz * mass.inv_mass[k] * plus.momentum[k];
    }
    !(d_minus > 0.0 && d_plus > 0.0)
}

struct TreeBuilder<'a, T: ?Sized, R> {
    target: &'a T,
    mass: &'a MassMatrix,
    step: f64,
    h0: f64,
    rng: &'a mut R,
}

impl<T: LogDensity + ?Sized, R: Rng> TreeBuilder<'_, T, R> {
    fn build(&mut self, edge: &PhasePoint, forward: bool, depth: usize) -> Subtree {
        if depth == 0 {
            let step = if forward { self.step } else { -self.step };
            let next = leapfrog(self.target, edge, step, self.mass);
            let delta = next.hamiltonian(self.mass) - self.h0;
            let divergent = !(delta <= DIVERGENCE_THRESHOLD);
            let accept = if delta.is_finite() { (-delta).exp().min(1.0) } else { 0.0 };
            return Subtree {
                proposal: next.position.clone(),
                minus: next.clone(),
                plus: next,
                log_weight: if delta.is_finite() { -delta } else { f64::NEG_INFINITY },
                sum_accept: accept,
                n_leapfrog: 1,
                divergent,
                turning: false,
            };
        }

        let first = self.build(edge, forward, depth - 1);
        if first.divergent || first.turning {
            return first;
        }
        let outer = if forward { &first.plus } else { &first.minus };
        let second = self.build(outer, forward, depth - 1);

        let n_leapfrog = first.n_leapfrog + second.n_leapfrog;
        let sum_accept = first.sum_accept + second.sum_accept;
        if second.divergent || second.turning {
            return Subtree {
                n_leapfrog,
                sum_accept,
                ..second
            };
        }

        let log_weight = log_sum_exp(first.log_weight, second.log_weight);
        let take_second = self.rng.random::<f64>().ln() < second.log_weight - log_weight;
        let (minus, plus) = if forward {
            (first.minus, second.plus)
        } else {
            (second.minus, first.plus)
        };
        let turning = is_turning(&minus, &plus, self.mass);
        Subtree {
            proposal: if take_second { second.proposal } else { first.proposal },
            minus,
            plus,
            log_weight,
            sum_accept,
            n_leapfrog,
            divergent: false,
            turning,
        }
    }
}

/// One NUTS transition from `current`.
pub fn nuts_step<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    current: &Position,
    step: f64,
    mass: &MassMatrix,
    max_depth: usize,
    rng: &mut R,
) -> (Position, TransitionStats) {
    let start = PhasePoint {
        position: current.clone(),
        momentum: mass.sample_momentum(rng),
    };
    let h0 = start.hamiltonian(mass);
    let mut minus = start.clone();
    let mut plus = start;
    let mut proposal = current.clone();
    let mut log_weight = 0.0;
    let mut sum_accept = 0.0;
    let mut n_leapfrog = 0;
    let mut depth = 0;
    let mut divergent = false;

    while depth < max_depth {
        let forward = rng.random::<bool>();
        let edge = if forward { plus.clone() } else { minus.clone() };
        let tree = {
            let mut builder = TreeBuilder {
                target,
                mass,
                step,
                h0,
                rng: &mut *rng,
            };
            builder.build(&edge, forward, depth)
        };
        n_leapfrog += tree.n_leapfrog;
        sum_accept += tree.sum_accept;
        if tree.divergent {
            divergent = true;
            break;
        }
        if tree.turning {
            break;
        }
        depth += 1;
        if rng.random::<f64>().ln() < tree.log_weight - log_weight {
            proposal = tree.proposal;
        }
        log_weight = log_sum_exp(log_weight, tree.log_weight);
        if forward {
            plus = tree.plus;
        } else {
            minus = tree.minus;
        }
        if is_turning(&minus, &plus, mass) {
            break;
        }
    }

    let stats = TransitionStats {
        log_density: proposal.log_density,
        depth,
        step_size: step,
        divergent,
        accept_stat: if n_leapfrog > 0 { sum_accept / n_leapfrog as f64 } else { 0.0 },
        n_leapfrog,
        energy: h0,
    };
    (proposal, stats)
}
