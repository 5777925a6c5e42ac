//! Convergence analysis: the coupled error dynamics, the constants of the
//! bound, feasibility limits and per-step / per-interval recursions.

pub mod constants;
pub mod dispersion;
pub mod noise_free;
pub mod recursions;

pub use constants::{
    alpha_star, compute_constants, eta_max_limit, gamma_limit, BoundConstants, BoundInputs, TheoryParams,
};
pub use dispersion::DispersionMatrix;
pub use noise_free::{error_terms, NoiseFreeCompanion};
pub use recursions::{interval_bounds_simplified, interval_bounds_tight, one_step_bounds, ErrorState};

use crate::vector;

/// `(1 - mu eta)|w1 - w2| - |w1 - w2 - eta (grad1 - grad2)|`, non-negative
/// whenever the objective is mu-strongly convex, beta-smooth and
/// `eta <= 2 / (mu + beta)`.
pub fn contraction_slack(w1: &[f64], w2: &[f64], grad1: &[f64], grad2: &[f64], mu: f64, eta: f64) -> f64 {
    let moved: Vec<f64> = (0..w1.len()).map(|i| w1[i] - w2[i] - eta * (grad1[i] - grad2[i])).collect();
    (1.0 - mu * eta) * vector::dist(w1, w2) - vector::norm(&moved)
}
