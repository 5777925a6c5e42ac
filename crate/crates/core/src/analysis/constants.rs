//! Convergence constants, feasibility limits and the optimality-gap bound.

use serde::{Deserialize, Serialize};

use super::dispersion::DispersionMatrix;
use crate::error::{DflError, Result};
use crate::fleet::HeterogeneityParams;

/// Problem constants the bounds depend on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryParams {
    pub mu: f64,
    pub beta: f64,
    pub omega: f64,
    pub delta: f64,
    pub sigma: f64,
    pub phi: f64,
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("delta", self.delta), ("sigma", self.sigma), ("phi", self.phi)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DflError::InvalidInput(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.mu > 0.0 && self.beta > self.mu && self.beta.is_finite()) {
            return Err(DflError::InvalidInput(format!("need 0 < mu < beta, got mu={} beta={}", self.mu, self.beta)));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(DflError::InvalidInput(format!("omega must be in [0, 1], got {}", self.omega)));
        }
        Ok(())
    }

    pub fn dispersion(&self) -> Result<DispersionMatrix> {
        DispersionMatrix::new(self.mu / self.beta, self.omega)
    }
}

impl From<&HeterogeneityParams> for TheoryParams {
    fn from(h: &HeterogeneityParams) -> Self {
        TheoryParams { mu: h.mu, beta: h.beta, omega: h.omega(), delta: h.delta, sigma: h.sigma, phi: h.phi }
    }
}

fn check_period(tau: usize, delay: usize) -> Result<()> {
    if tau == 0 || delay >= tau {
        return Err(DflError::InvalidSchedule(format!("need 0 <= delay < tau, got tau={tau} delay={delay}")));
    }
    Ok(())
}

/// `(1 + lambda_plus)^tau - 1 - tau lambda_plus`
fn growth_excess(disp: &DispersionMatrix, tau: usize) -> f64 {
    (1.0 + disp.lambda_plus).powi(tau as i32) - 1.0 - tau as f64 * disp.lambda_plus
}

/// Largest admissible `eta_max` (exclusive).
pub fn eta_max_limit(params: &TheoryParams, tau: usize, delay: usize) -> Result<f64> {
    params.validate()?;
    check_period(tau, delay)?;
    let disp = params.dispersion()?;
    let first = 2.0 / (params.beta + params.mu);
    let excess = growth_excess(&disp, tau);
    let second = if excess > 0.0 {
        (tau - delay) as f64 * params.mu / (params.beta * params.beta * excess)
    } else {
        f64::INFINITY
    };
    Ok(first.min(second))
}

/// `C3 = (tau - delay) mu / beta - eta_max beta [(1 + lambda_plus)^tau - 1 - tau lambda_plus]`
pub fn c3(params: &TheoryParams, disp: &DispersionMatrix, tau: usize, delay: usize, eta_max: f64) -> f64 {
    (tau - delay) as f64 * params.mu / params.beta - eta_max * params.beta * growth_excess(disp, tau)
}

/// `1 - (1 - x)^n` without cancellation for small `x`.
fn one_minus_pow(x: f64, n: usize) -> f64 {
    -(n as f64 * (-x).ln_1p()).exp_m1()
}

/// Largest admissible step-size decay `gamma` (exclusive) for a given `eta_max`.
pub fn gamma_limit(params: &TheoryParams, tau: usize, delay: usize, eta_max: f64) -> Result<f64> {
    params.validate()?;
    check_period(tau, delay)?;
    let disp = params.dispersion()?;
    let contraction = one_minus_pow(params.mu * eta_max, 2 * (tau - delay));
    Ok(contraction.min(c3(params, &disp, tau, delay, eta_max) * eta_max * params.beta))
}

/// `C2 = (2 beta / s) [(1 + lambda_plus)^tau - 1]`
pub fn c2(params: &TheoryParams, disp: &DispersionMatrix, tau: usize) -> f64 {
    2.0 * params.beta / disp.s * ((1.0 + disp.lambda_plus).powi(tau as i32) - 1.0)
}

/// Largest admissible combiner weight `alpha` (exclusive).
pub fn alpha_star(params: &TheoryParams, tau: usize, delay: usize, eta_max: f64, gamma: f64) -> Result<f64> {
    params.validate()?;
    check_period(tau, delay)?;
    let disp = params.dispersion()?;
    let c2 = c2(params, &disp, tau);
    let c3 = c3(params, &disp, tau, delay, eta_max);
    let margin = eta_max * params.beta * c3 - gamma;
    if margin <= 0.0 {
        return Err(DflError::Infeasible("gamma >= eta_max beta C3".into()));
    }
    let growth = (1.0 + disp.lambda_plus).powi(tau as i32);
    let denom = c2 * eta_max * eta_max / margin * 2.0 * params.omega * c2 * (1.0 + gamma) + (1.0 + gamma) * growth;
    Ok(1.0 / denom)
}

/// Everything needed to evaluate the bound for one `(tau, delay, alpha)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    pub params: TheoryParams,
    pub tau: usize,
    pub delay: usize,
    pub alpha: f64,
    pub eta_max: f64,
    pub gamma: f64,
    /// Initial optimality gap `|w(0) - w*|`.
    pub e3_0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundConstants {
    pub inputs: BoundInputs,
    pub dispersion: DispersionMatrix,
    pub g: [f64; 6],
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub k1: f64,
    pub k2: f64,
    pub y1: f64,
    pub y2: f64,
    pub y3: f64,
    pub alpha_star: f64,
    pub eta_limit: f64,
    pub gamma_limit: f64,
}

/// `K1 = (mu + 4 omega beta) / (-s beta lambda_plus lambda_minus) [(1 + lambda_plus)^tau - 1]`,
/// the drift coefficient of the subnet-dispersion recursion.
pub fn k1(params: &TheoryParams, disp: &DispersionMatrix, tau: usize) -> f64 {
    let (mu, beta) = (params.mu, params.beta);
    (mu + 4.0 * params.omega * beta) / (-disp.s * beta * disp.lambda_plus * disp.lambda_minus)
        * ((1.0 + disp.lambda_plus).powi(tau as i32) - 1.0)
}

/// `n choose k` for `n <= 64`, exactly.
fn binomial_exact(n: u32, k: u32) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

fn binomial(n: usize, k: usize) -> f64 {
    if n <= 64 {
        binomial_exact(n as u32, k as u32) as f64
    } else {
        let k = k.min(n - k);
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }
}

/// `K2 = (beta / s) sum_{l=0}^{tau-2} C(tau, l+2) [lambda_plus^{l+1} - lambda_minus^{l+1}]`
pub fn k2(params: &TheoryParams, disp: &DispersionMatrix, tau: usize) -> f64 {
    params.beta / disp.s * (binomial_tail(disp.lambda_plus, tau) - binomial_tail(disp.lambda_minus, tau))
}

/// `sum_{l=0}^{tau-2} C(tau, l+2) x^{l+1}`. The closed form
/// `[(1+x)^tau - 1 - tau x] / x` is used when the series alternates with
/// large terms.
fn binomial_tail(x: f64, tau: usize) -> f64 {
    if x < -0.5 {
        return ((1.0 + x).powi(tau as i32) - 1.0 - tau as f64 * x) / x;
    }
    (0..tau.saturating_sub(1)).map(|l| binomial(tau, l + 2) * x.powi((l + 1) as i32)).sum()
}

/// Computes every constant of the bound and checks that `eta_max`, `gamma`
/// and `alpha` sit strictly inside their feasibility limits.
pub fn compute_constants(inputs: &BoundInputs) -> Result<BoundConstants> {
    let p = &inputs.params;
    p.validate()?;
    let (tau, delay, alpha, eta_max, gamma) = (inputs.tau, inputs.delay, inputs.alpha, inputs.eta_max, inputs.gamma);
    check_period(tau, delay)?;
    if !(0.0..1.0).contains(&alpha) {
        return Err(DflError::InvalidInput(format!("alpha must be in [0, 1), got {alpha}")));
    }
    if !(inputs.e3_0.is_finite() && inputs.e3_0 >= 0.0) {
        return Err(DflError::InvalidInput("e3_0 must be finite and >= 0".into()));
    }
    let disp = p.dispersion()?;
    let eta_limit = eta_max_limit(p, tau, delay)?;
    if !(eta_max > 0.0 && eta_max < eta_limit) {
        return Err(DflError::Infeasible(format!("eta_max = {eta_max} outside (0, {eta_limit})")));
    }
    let gamma_lim = gamma_limit(p, tau, delay, eta_max)?;
    if !(gamma >= 0.0 && gamma < gamma_lim) {
        return Err(DflError::Infeasible(format!("gamma = {gamma} outside [0, {gamma_lim})")));
    }
    let a_star = alpha_star(p, tau, delay, eta_max, gamma)?;
    if alpha >= a_star {
        return Err(DflError::Infeasible(format!("alpha = {alpha} >= alpha* = {a_star}")));
    }

    let (mu, beta, omega, delta) = (p.mu, p.beta, p.omega, p.delta);
    let growth = (1.0 + disp.lambda_plus).powi(tau as i32);
    let c1 =
        (1.0 - alpha) * one_minus_pow(mu * eta_max, 2 * (tau - delay)) + alpha * one_minus_pow(mu * eta_max, 2 * tau);
    let c2 = c2(p, &disp, tau);
    let c3 = c3(p, &disp, tau, delay, eta_max);
    let k1 = k1(p, &disp, tau);
    let k2 = k2(p, &disp, tau);

    let noise = p.sigma * p.sigma + p.phi * p.phi;
    let y1 = ((tau as f64 - (1.0 - alpha) * delay as f64) * noise * eta_max / (c1 - gamma)).sqrt();

    let coupling = eta_max * alpha * 2.0 * omega * c2 * (1.0 + gamma);
    let retention = 1.0 - alpha * (1.0 + gamma) * growth;
    let gap_margin = beta * c3 - gamma;
    let branch1 = (eta_max * coupling * inputs.e3_0 + alpha * k1 * delta * (1.0 + gamma)) / retention;
    // Second branch with numerator and denominator scaled by `coupling`, so it
    // stays finite when alpha or omega is zero.
    let branch2_den = retention - coupling * c2 / gap_margin;
    let branch2 = (alpha * (1.0 + gamma) * k1 * delta + coupling * k2 * delta / gap_margin) / branch2_den;
    if retention <= 0.0 || branch2_den <= 0.0 || gap_margin <= 0.0 {
        return Err(DflError::Infeasible("subnet-dispersion recursion does not contract".into()));
    }
    let y2 = branch1.max(branch2);
    let y3 = (eta_max * inputs.e3_0).max((c2 * y2 + k2 * delta) * eta_max / (eta_max * beta * c3 - gamma));

    Ok(BoundConstants {
        inputs: *inputs,
        g: disp.g(),
        dispersion: disp,
        c1,
        c2,
        c3,
        k1,
        k2,
        y1,
        y2,
        y3,
        alpha_star: a_star,
        eta_limit,
        gamma_limit: gamma_lim,
    })
}

impl BoundConstants {
    /// Step size of interval `k`: `eta_max / (1 + gamma k)`.
    pub fn eta(&self, k: usize) -> f64 {
        self.inputs.eta_max / (1.0 + self.inputs.gamma * k as f64)
    }

    /// Bound on `E |w(t_k) - w*|^2`: `2 Y1^2 eta_k + 2 Y3^2 eta_k^2`.
    pub fn theorem_bound(&self, k: usize) -> f64 {
        let eta = self.eta(k);
        2.0 * self.y1 * self.y1 * eta + 2.0 * self.y3 * self.y3 * eta * eta
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> TheoryParams {
        TheoryParams { mu: 0.5, beta: 2.0, omega: 0.1, delta: 0.3, sigma: 0.2, phi: 0.1 }
    }

    #[test]
    fn test_k2_tau_two_is_beta() {
        let p = params();
        let d = p.dispersion().unwrap();
        assert!((k2(&p, &d, 2) - p.beta).abs() < 1e-14);
    }

    #[test]
    fn test_binomial_middle() {
        assert_eq!(binomial_exact(64, 32), 1_832_624_140_942_590_534);
    }

    #[test]
    fn test_feasibility_errors_name_quantity() {
        let p = params();
        let lim = eta_max_limit(&p, 5, 1).unwrap();
        let inputs =
            BoundInputs { params: p, tau: 5, delay: 1, alpha: 0.0, eta_max: lim * 1.01, gamma: 0.0, e3_0: 1.0 };
        match compute_constants(&inputs) {
            Err(DflError::Infeasible(msg)) => assert!(msg.contains("eta_max")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn test_delay_must_be_below_period() {
        let p = params();
        assert!(matches!(eta_max_limit(&p, 3, 3), Err(DflError::InvalidSchedule(_))));
    }

    #[test]
    fn test_bound_decreasing_in_k() {
        let p = params();
        let eta = 0.9 * eta_max_limit(&p, 4, 1).unwrap();
        let gamma = 0.9 * gamma_limit(&p, 4, 1, eta).unwrap();
        let inputs = BoundInputs { params: p, tau: 4, delay: 1, alpha: 0.0, eta_max: eta, gamma, e3_0: 1.0 };
        let c = compute_constants(&inputs).unwrap();
        for k in 0..20 {
            assert!(c.theorem_bound(k + 1) < c.theorem_bound(k));
        }
    }
}
