//! One-step and per-interval recursions on the three error terms.

use serde::{Deserialize, Serialize};

use super::constants::{BoundConstants, TheoryParams};
use crate::error::{DflError, Result};

/// `e1^2` (local dispersion, squared), `e2` (subnet dispersion) and `e3`
/// (optimality gap of the noise-free global model).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorState {
    pub e1_sq: f64,
    pub e2: f64,
    pub e3: f64,
}

/// Upper bounds on the error terms after one SGD step with step size `eta`,
/// valid inside a global interval.
pub fn one_step_bounds(state: &ErrorState, params: &TheoryParams, eta: f64) -> Result<ErrorState> {
    params.validate()?;
    let limit = 2.0 / (params.mu + params.beta);
    if !(eta > 0.0) || eta > limit {
        return Err(DflError::StepSizeTooLarge { eta, limit });
    }
    let (mu, beta) = (params.mu, params.beta);
    let noise = params.sigma * params.sigma + params.phi * params.phi;
    Ok(ErrorState {
        e1_sq: (1.0 - mu * eta).powi(2) * state.e1_sq + eta * eta * noise,
        e2: (1.0 + eta * (beta - mu)) * state.e2 + 2.0 * params.omega * eta * beta * state.e3 + eta * params.delta,
        e3: (1.0 - eta * mu) * state.e3 + eta * beta * state.e2,
    })
}

/// Error terms at `t_{k+1}` from those at `t_k`, using the exact growth
/// factors `(1 + eta beta lambda)^n` over the interval.
pub fn interval_bounds_tight(state: &ErrorState, consts: &BoundConstants, eta: f64) -> ErrorState {
    let inp = &consts.inputs;
    let p = &inp.params;
    let d = &consts.dispersion;
    let [g1, g2, g3, _g4, g5, g6] = consts.g;
    let (tau, delay, alpha) = (inp.tau, inp.delay, inp.alpha);
    let eb = eta * p.beta;
    let q = 1.0 - p.mu * eta;
    let noise = p.sigma * p.sigma + p.phi * p.phi;
    let early = tau - delay;

    let e1_sq = ((1.0 - alpha) * q.powi(2 * early as i32) + alpha * q.powi(2 * tau as i32)) * state.e1_sq
        + (tau as f64 - (1.0 - alpha) * delay as f64) * eta * eta * noise;

    let pp_tau = d.pi_plus(eb, tau);
    let pm_tau = d.pi_minus(eb, tau);
    let pp_early = d.pi_plus(eb, early);
    let pm_early = d.pi_minus(eb, early);

    // First row of U (I + eta beta D)^tau U^-1 and of U [(I + eta beta D)^tau - I] D^-1 U^-1.
    let (s, lp, lm) = (d.s, d.lambda_plus, d.lambda_minus);
    let m_gap = 2.0 * p.omega / s;
    let m_plus = 0.5 * (1.0 + 1.0 / s);
    let drift_plus = (s + 1.0) / (2.0 * s * lp);
    let drift_minus = (s - 1.0) / (2.0 * s * lm);
    let e2 = alpha
        * ((m_plus * pp_tau + (1.0 - m_plus) * pm_tau) * state.e2
            + m_gap * (pp_tau - pm_tau) * state.e3
            + (drift_plus * (pp_tau - 1.0) + drift_minus * (pm_tau - 1.0)) * p.delta / p.beta);

    let psi = (1.0 - alpha) * (g1 * pp_early + g2 * pm_early) + alpha * (g1 * pp_tau + g2 * pm_tau);
    let drift = (1.0 - alpha) * (g5 * (pp_early - 1.0) + g6 * (pm_early - 1.0))
        + alpha * (g5 * (pp_tau - 1.0) + g6 * (pm_tau - 1.0));
    let e3 = psi * state.e3
        + 2.0 * g3 * ((1.0 - alpha) * pp_early + alpha * pp_tau - 1.0) * state.e2
        + drift * p.delta / p.beta;

    ErrorState { e1_sq, e2, e3 }
}

/// Same transition written with the constants `C1..C3`, `K1`, `K2`.
pub fn interval_bounds_simplified(state: &ErrorState, consts: &BoundConstants, eta: f64) -> ErrorState {
    let inp = &consts.inputs;
    let p = &inp.params;
    let alpha = inp.alpha;
    let noise = p.sigma * p.sigma + p.phi * p.phi;
    let growth = (1.0 + consts.dispersion.lambda_plus).powi(inp.tau as i32);
    ErrorState {
        e1_sq: (1.0 - eta / inp.eta_max * consts.c1) * state.e1_sq
            + eta * eta * (inp.tau as f64 - (1.0 - alpha) * inp.delay as f64) * noise,
        e2: alpha * growth * state.e2
            + eta * alpha * 2.0 * p.omega * consts.c2 * state.e3
            + eta * alpha * consts.k1 * p.delta,
        e3: (1.0 - eta * p.beta * consts.c3) * state.e3 + consts.c2 * eta * state.e2 + eta * eta * consts.k2 * p.delta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_one_step_gap_example() {
        // eta mu = 0.1, eta beta = 0.5
        let p = TheoryParams { mu: 0.1, beta: 0.5, omega: 0.0, delta: 0.0, sigma: 0.0, phi: 0.0 };
        let s = ErrorState { e1_sq: 0.0, e2: 0.2, e3: 1.0 };
        let b = one_step_bounds(&s, &p, 1.0).unwrap();
        assert!((b.e3 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn test_one_step_rejects_large_eta() {
        let p = TheoryParams { mu: 1.0, beta: 3.0, omega: 0.0, delta: 0.0, sigma: 0.0, phi: 0.0 };
        let r = one_step_bounds(&ErrorState::default(), &p, 0.6);
        assert!(matches!(r, Err(DflError::StepSizeTooLarge { .. })));
    }
}
