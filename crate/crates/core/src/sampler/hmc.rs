//! Phase-space points, the diagonal metric and the leapfrog integrator.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::LogDensity;

/// Diagonal Euclidean metric. Kinetic energy is `½ rᵀ M⁻¹ r`.
#[derive(Debug, Clone, PartialEq)]
pub struct MassMatrix {
    /// Diagonal of `M⁻¹`; the adapted entries estimate posterior variances.
    pub inv_mass: Vec<f64>,
}

impl MassMatrix {
    pub fn unit(dim: usize) -> Self {
        Self {
            inv_mass: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.inv_mass.len()
    }

    pub fn kinetic_energy(&self, r: &[f64]) -> f64 {
        0.5 * r
            .iter()
            .zip(&self.inv_mass)
            .map(|(ri, m)| ri * ri * m)
            .sum::<f64>()
    }

    pub fn velocity(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.inv_mass).map(|(ri, m)| ri * m).collect()
    }

    /// Draws `r ~ N(0, M)`.
    pub fn sample_momentum(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.inv_mass
            .iter()
            .map(|m| {
                let xi: f64 = StandardNormal.sample(rng);
                xi / m.sqrt()
            })
            .collect()
    }
}

/// Position together with its log-density and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Position {
    pub z: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
}

impl Position {
    pub fn new<T: LogDensity + ?Sized>(target: &T, z: Vec<f64>) -> Self {
        let mut grad = vec![0.0; z.len()];
        let log_density = target.log_density_and_gradient(&z, &mut grad);
        Self {
            z,
            log_density,
            grad,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.log_density.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub position: Position,
    pub momentum: Vec<f64>,
}

impl PhasePoint {
    /// `-log p(z) + ½ rᵀ M⁻¹ r`; non-finite values map to `+inf`.
    pub fn hamiltonian(&self, mass: &MassMatrix) -> f64 {
        let h = -self.position.log_density + mass.kinetic_energy(&self.momentum);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }
}

/// One kick-drift-kick step of size `step` (negative steps run backwards).
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    point: &PhasePoint,
    step: f64,
    mass: &MassMatrix,
) -> PhasePoint {
    let half = 0.5 * step;
    let mut r: Vec<f64> = point
        .momentum
        .iter()
        .zip(&point.position.grad)
        .map(|(r, g)| r + half * g)
        .collect();
    let z: Vec<f64> = point
        .position
        .z
        .iter()
        .zip(r.iter().zip(&mass.inv_mass))
        .map(|(z, (r, m))| z + step * m * r)
        .collect();
    let position = Position::new(target, z);
    for (ri, g) in r.iter_mut().zip(&position.grad) {
        *ri += half * g;
    }
    PhasePoint {
        position,
        momentum: r,
    }
}
