//! Online control: parameter estimation from uploaded models, step-size
//! selection, the local-aggregation trigger and the per-interval choice of
//! `(tau, alpha)` that trades energy and delay against the bound.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{alpha_star, compute_constants, eta_max_limit, gamma_limit, BoundInputs, TheoryParams};
use crate::engine::{DecisionContext, IntervalPlan, IntervalSource, LocalAggregation, TriggerContext};
use crate::error::{DflError, Result};
use crate::fleet::{
    estimate_sgd_noise, measure_diversity, measure_smoothness_convexity, FleetTopology, HeterogeneityParams,
    OptimumDistance,
};
use crate::losses::LossModel;
use crate::netcost::{CostModel, CostSnapshot};
use crate::rng;
use crate::vector::{self, ModelVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    /// Weight of the energy term.
    pub c1: f64,
    /// Weight of the delay term.
    pub c2: f64,
    /// Weight of the bound term.
    pub c3: f64,
    pub tau_max: usize,
    /// Optional lower end of the searched `tau` range.
    pub tau_min: Option<usize>,
    /// Grid spacing of the searched combiner weights.
    pub alpha_step: f64,
    /// Fraction of each feasibility limit used for `eta_max` and `gamma`.
    pub safety: f64,
    /// `zeta = zeta_fraction * 2 beta_hat`.
    pub zeta_fraction: f64,
    pub zeta_c_fraction: f64,
    /// Noise budget of the local-aggregation trigger.
    pub phi: f64,
    pub num_probes: usize,
    pub noise_repeats: usize,
    /// Radius of the random probes used before any model has been uploaded.
    pub probe_radius: f64,
    /// Local aggregation used inside controlled intervals.
    pub local: LocalAggregation,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            c1: 1.0,
            c2: 1.0,
            c3: 1.0,
            tau_max: 40,
            tau_min: None,
            alpha_step: 0.01,
            safety: 0.9,
            zeta_fraction: 0.1,
            zeta_c_fraction: 0.1,
            phi: 1.0,
            num_probes: 32,
            noise_repeats: 4,
            probe_radius: 1.0,
            local: LocalAggregation::Triggered,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c1", self.c1), ("c2", self.c2), ("c3", self.c3), ("phi", self.phi)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DflError::InvalidInput(format!("control.{name} must be finite and >= 0")));
            }
        }
        if !(self.alpha_step > 0.0 && self.alpha_step < 1.0) {
            return Err(DflError::InvalidInput("control.alpha_step must be in (0, 1)".into()));
        }
        if !(self.safety > 0.0 && self.safety < 1.0) {
            return Err(DflError::InvalidInput("control.safety must be in (0, 1)".into()));
        }
        if self.tau_max == 0 || self.num_probes < 2 {
            return Err(DflError::InvalidInput("control.tau_max >= 1 and control.num_probes >= 2 required".into()));
        }
        Ok(())
    }
}

/// `(eta_max, gamma)` at `safety` times their limits.
pub fn select_step_size(params: &TheoryParams, tau: usize, delay: usize, safety: f64) -> Result<(f64, f64)> {
    let eta = safety * eta_max_limit(params, tau, delay)?;
    let gamma_lim = gamma_limit(params, tau, delay, eta)?;
    if !(gamma_lim > 0.0) {
        return Err(DflError::Infeasible(format!("no admissible gamma for tau={tau}, delay={delay}")));
    }
    Ok((eta, safety * gamma_lim))
}

/// Per-subnet contribution `varrho_c (2 delta_c^2 + 4 omega_c^2 beta^2 gap_c^2)`
/// to the trigger budget.
pub fn trigger_contributions(params: &HeterogeneityParams, subnet_weights: &[f64], gaps: &[f64]) -> Vec<f64> {
    (0..subnet_weights.len())
        .map(|c| {
            let w = params.omega_c(c);
            subnet_weights[c]
                * (2.0 * params.delta_c[c].powi(2) + 4.0 * w * w * params.beta * params.beta * gaps[c] * gaps[c])
        })
        .collect()
}

/// Smallest set of subnets to aggregate so that the contributions of the
/// remaining ones fit in `phi^2`; largest contributions are chosen first.
pub fn trigger(params: &HeterogeneityParams, subnet_weights: &[f64], gaps: &[f64]) -> Result<Vec<bool>> {
    let n = subnet_weights.len();
    if gaps.len() != n || params.delta_c.len() != n || params.zeta_c.len() != n {
        return Err(DflError::DimensionMismatch { expected: n, got: gaps.len().min(params.delta_c.len()) });
    }
    let contrib = trigger_contributions(params, subnet_weights, gaps);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| contrib[*b].total_cmp(&contrib[*a]).then(a.cmp(b)));
    let budget = params.phi * params.phi;
    let mut theta = vec![false; n];
    for &c in &order {
        let remaining: f64 = (0..n).filter(|d| !theta[*d]).map(|d| contrib[d]).sum();
        if remaining <= budget {
            break;
        }
        theta[c] = true;
    }
    Ok(theta)
}

/// Inputs of one interval decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemInput {
    pub params: HeterogeneityParams,
    pub subnet_weights: Vec<f64>,
    pub costs: CostSnapshot,
    /// Estimated `|w_c - w*|` per subnet, held constant over the horizon.
    pub gap_estimates: Vec<f64>,
    pub e3_0: f64,
    pub t_k: usize,
    pub total_steps: usize,
    pub delay: usize,
    pub config: ControlConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub tau: usize,
    pub alpha: f64,
    pub eta_max: f64,
    pub gamma: f64,
    pub alpha_star: f64,
    pub objective: f64,
    /// Set when no grid point was feasible and the fallback was used.
    pub fallback: bool,
}

/// Terms of the interval objective for one candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub tau: usize,
    pub alpha: f64,
    pub eta_max: f64,
    pub gamma: f64,
    /// Subnets that aggregate locally at every step of the interval.
    pub local_on: Vec<bool>,
    /// Projected energy over the remaining horizon, before weighting.
    pub energy: f64,
    pub delay: f64,
    /// Optimality-gap bound at the end of the horizon.
    pub bound: f64,
    pub objective: f64,
}

pub fn objective_breakdown(input: &ProblemInput, tau: usize, alpha: f64) -> Option<ObjectiveBreakdown> {
    let theory = TheoryParams::from(&input.params);
    let (eta_max, gamma) = select_step_size(&theory, tau, input.delay, input.config.safety).ok()?;
    let consts = compute_constants(&BoundInputs {
        params: theory,
        tau,
        delay: input.delay,
        alpha,
        eta_max,
        gamma,
        e3_0: input.e3_0,
    })
    .ok()?;
    let rounds = (input.total_steps - input.t_k) as f64 / tau as f64;
    let local_on = trigger(&input.params, &input.subnet_weights, &input.gap_estimates).ok()?;
    let mut energy = input.costs.global_energy;
    let mut delay = input.costs.global_delay;
    for (c, on) in local_on.iter().enumerate() {
        if *on {
            energy += tau as f64 * input.costs.local_energy[c];
            delay += tau as f64 * input.costs.local_delay[c];
        }
    }
    let bound = consts.theorem_bound((input.total_steps - input.t_k) / tau);
    let cfg = &input.config;
    let (energy, delay) = (rounds * energy, rounds * delay);
    let objective = cfg.c1 * energy + cfg.c2 * delay + cfg.c3 * bound;
    objective.is_finite().then_some(ObjectiveBreakdown {
        tau,
        alpha,
        eta_max,
        gamma,
        local_on,
        energy,
        delay,
        bound,
        objective,
    })
}

/// Objective value of one candidate with its step-size rule, or `None` when
/// it is infeasible.
pub fn evaluate_candidate(input: &ProblemInput, tau: usize, alpha: f64) -> Option<(f64, f64, f64)> {
    objective_breakdown(input, tau, alpha).map(|b| (b.objective, b.eta_max, b.gamma))
}

/// Grid search over `tau` and `alpha`; ties go to the smaller `tau`, then the
/// smaller `alpha`. Falls back to `(delay + 1, 0)` when nothing is feasible.
pub fn solve_p(input: &ProblemInput) -> Result<Decision> {
    input.config.validate()?;
    input.params.validate()?;
    if input.t_k >= input.total_steps {
        return Err(DflError::InvalidInput("t_k must be before the horizon".into()));
    }
    let n = input.subnet_weights.len();
    if input.costs.local_energy.len() != n || input.costs.local_delay.len() != n {
        return Err(DflError::DimensionMismatch { expected: n, got: input.costs.local_energy.len() });
    }
    let theory = TheoryParams::from(&input.params);
    let lo = (input.delay + 1).max(input.config.tau_min.unwrap_or(1));
    let hi = input.config.tau_max.min(input.total_steps - input.t_k);
    let mut best: Option<Decision> = None;
    for tau in lo..=hi {
        let Ok((eta_max, gamma)) = select_step_size(&theory, tau, input.delay, input.config.safety) else {
            continue;
        };
        let Ok(a_star) = alpha_star(&theory, tau, input.delay, eta_max, gamma) else {
            continue;
        };
        let mut j = 0usize;
        loop {
            let alpha = j as f64 * input.config.alpha_step;
            if alpha >= a_star || alpha >= 1.0 {
                break;
            }
            if let Some((obj, eta, gam)) = evaluate_candidate(input, tau, alpha) {
                if best.as_ref().is_none_or(|b| obj < b.objective) {
                    best = Some(Decision {
                        tau,
                        alpha,
                        eta_max: eta,
                        gamma: gam,
                        alpha_star: a_star,
                        objective: obj,
                        fallback: false,
                    });
                }
            }
            j += 1;
        }
    }
    if let Some(b) = best {
        return Ok(b);
    }
    let tau = input.delay + 1;
    let (eta_max, gamma) = select_step_size(&theory, tau, input.delay, input.config.safety)?;
    Ok(Decision {
        tau,
        alpha: 0.0,
        eta_max,
        gamma,
        alpha_star: alpha_star(&theory, tau, input.delay, eta_max, gamma).unwrap_or(0.0),
        objective: f64::NAN,
        fallback: true,
    })
}

/// Picks up to `count` distinct probes from `candidates`, in a seeded order.
fn select_probes(candidates: &[ModelVector], count: usize, seed: u64, tag: u64) -> Vec<ModelVector> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.shuffle(&mut rng::stream(seed, rng::PROBES, tag, 0));
    let mut out: Vec<ModelVector> = Vec::new();
    for i in idx {
        if out.len() == count {
            break;
        }
        if !out.iter().any(|p| p == &candidates[i]) {
            out.push(candidates[i].clone());
        }
    }
    out
}

/// Estimates every heterogeneity constant from uploaded models, one per
/// device. Secant pairs are formed cyclically over the probe set.
pub fn estimate_parameters(
    topology: &FleetTopology,
    model: &LossModel,
    uploads: &[ModelVector],
    config: &ControlConfig,
    batch_size: usize,
    seed: u64,
    tag: u64,
) -> Result<HeterogeneityParams> {
    let probes = select_probes(uploads, config.num_probes, seed, tag);
    if probes.len() < 2 {
        return Err(DflError::DegenerateProbes("uploaded models are all identical".into()));
    }
    let pairs: Vec<(ModelVector, ModelVector)> =
        (0..probes.len()).map(|j| (probes[j].clone(), probes[(j + 1) % probes.len()].clone())).collect();
    let (mu, mut beta) = measure_smoothness_convexity(topology, model, &pairs)?;
    if !(mu > 0.0) {
        return Err(DflError::DegenerateProbes("estimated curvature is not positive".into()));
    }
    beta = beta.max(mu * (1.0 + 1e-6));
    let zeta = config.zeta_fraction * 2.0 * beta;
    let zeta_c = config.zeta_c_fraction * 2.0 * beta;
    let div = measure_diversity(topology, model, &probes, zeta, zeta_c, OptimumDistance::GradientBound { mu })?;
    let sigma = estimate_sgd_noise(topology, model, uploads, batch_size, config.noise_repeats, seed ^ tag)?;
    Ok(HeterogeneityParams {
        mu,
        beta,
        delta: div.delta,
        zeta,
        delta_c: div.delta_c,
        zeta_c: vec![zeta_c; topology.num_subnets()],
        sigma,
        phi: config.phi,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub k: usize,
    pub t: usize,
    pub decision: Decision,
    pub params: HeterogeneityParams,
}

/// Online interval source that re-estimates the fleet and re-solves the
/// interval problem at every global capture.
pub struct Controller<'a> {
    pub topology: &'a FleetTopology,
    pub model: LossModel,
    pub config: ControlConfig,
    pub costs: Option<&'a CostModel>,
    pub delay: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub params: Option<HeterogeneityParams>,
    pub decisions: Vec<DecisionRecord>,
}

impl<'a> Controller<'a> {
    pub fn new(
        topology: &'a FleetTopology,
        model: LossModel,
        config: ControlConfig,
        delay: usize,
        total_steps: usize,
        batch_size: usize,
        seed: u64,
    ) -> Self {
        Controller {
            topology,
            model,
            config,
            costs: None,
            delay,
            total_steps,
            batch_size,
            seed,
            params: None,
            decisions: Vec::new(),
        }
    }

    fn gap(&self, w: &[f64], mu: f64) -> Result<f64> {
        Ok(vector::norm(&self.topology.global_objective(&self.model)?.gradient(w)?) / mu)
    }

    fn decide(&mut self, k: usize, t_k: usize, uploads: &[ModelVector], global: &[f64]) -> Result<IntervalPlan> {
        let params = estimate_parameters(
            self.topology,
            &self.model,
            uploads,
            &self.config,
            self.batch_size,
            self.seed,
            k as u64,
        )?;
        let weights: Vec<f64> = (0..self.topology.num_subnets()).map(|c| self.topology.subnet_weight(c)).collect();
        let gaps: Vec<f64> = (0..self.topology.num_subnets())
            .map(|c| self.gap(&self.topology.subnet_average(c, uploads), params.mu))
            .collect::<Result<_>>()?;
        let costs = match self.costs {
            Some(m) => m.snapshot((1u64 << 40) + k as u64),
            None => CostSnapshot {
                global_energy: 0.0,
                global_delay: 0.0,
                local_energy: vec![0.0; weights.len()],
                local_delay: vec![0.0; weights.len()],
            },
        };
        let input = ProblemInput {
            params: params.clone(),
            subnet_weights: weights,
            costs,
            gap_estimates: gaps,
            e3_0: self.gap(global, params.mu)?,
            t_k,
            total_steps: self.total_steps,
            delay: self.delay,
            config: self.config.clone(),
        };
        let decision = solve_p(&input)?;
        let eta = decision.eta_max / (1.0 + decision.gamma * k as f64);
        let plan = IntervalPlan {
            tau: decision.tau,
            delay: self.delay,
            up_delay: self.delay - self.delay / 2,
            alpha: decision.alpha,
            eta,
            local: self.config.local.clone(),
        };
        self.decisions.push(DecisionRecord { k, t: t_k, decision, params: params.clone() });
        self.params = Some(params);
        Ok(plan)
    }
}

impl IntervalSource for Controller<'_> {
    fn first_interval(&mut self, start: &[f64]) -> Result<IntervalPlan> {
        let mut probes = vec![start.to_vec()];
        for j in 0..self.config.num_probes.saturating_sub(1) {
            let mut r = rng::stream(self.seed, rng::PROBES, u64::MAX, j as u64);
            let dir: Vec<f64> = (0..start.len()).map(|_| StandardNormal.sample(&mut r)).collect();
            let n = vector::norm(&dir).max(1e-300);
            probes.push(start.iter().zip(&dir).map(|(s, d)| s + self.config.probe_radius * d / n).collect());
        }
        // Before any upload, device i is probed at the i-th perturbed point.
        let uploads: Vec<ModelVector> =
            (0..self.topology.num_devices()).map(|i| probes[i % probes.len()].clone()).collect();
        self.decide(0, 0, &uploads, start)
    }

    fn next_interval(&mut self, ctx: &DecisionContext<'_>) -> Result<IntervalPlan> {
        self.decide(ctx.k + 1, ctx.next_sync, ctx.uploads, ctx.snapshot)
    }

    fn trigger(&mut self, ctx: &TriggerContext<'_>) -> Result<Vec<bool>> {
        let params =
            self.params.clone().ok_or_else(|| DflError::InvalidSchedule("trigger before estimation".into()))?;
        let weights: Vec<f64> = (0..self.topology.num_subnets()).map(|c| self.topology.subnet_weight(c)).collect();
        let gaps: Vec<f64> = ctx.subnet_aggregates.iter().map(|w| self.gap(w, params.mu)).collect::<Result<_>>()?;
        trigger(&params, &weights, &gaps)
    }
}

impl Controller<'_> {
    /// Mean of the chosen combiner weights.
    pub fn mean_alpha(&self) -> f64 {
        if self.decisions.is_empty() {
            return f64::NAN;
        }
        self.decisions.iter().map(|d| d.decision.alpha).sum::<f64>() / self.decisions.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize) -> HeterogeneityParams {
        HeterogeneityParams {
            mu: 0.5,
            beta: 2.0,
            delta: 0.1,
            zeta: 0.4,
            delta_c: vec![0.3; n],
            zeta_c: vec![0.2; n],
            sigma: 0.1,
            phi: 0.0,
        }
    }

    #[test]
    fn test_zero_budget_aggregates_everywhere() {
        let p = params(3);
        let th = trigger(&p, &[0.2, 0.3, 0.5], &[1.0, 0.0, 2.0]).unwrap();
        assert_eq!(th, vec![true, true, true]);
    }

    #[test]
    fn test_large_budget_aggregates_nowhere() {
        let mut p = params(3);
        p.phi = 100.0;
        let th = trigger(&p, &[0.2, 0.3, 0.5], &[1.0, 0.0, 2.0]).unwrap();
        assert_eq!(th, vec![false, false, false]);
    }

    #[test]
    fn test_energy_only_prefers_longest_tau() {
        let mut p = params(2);
        p.phi = 10.0;
        let input = ProblemInput {
            params: p,
            subnet_weights: vec![0.5, 0.5],
            costs: CostSnapshot {
                global_energy: 1.0,
                global_delay: 0.0,
                local_energy: vec![0.1, 0.1],
                local_delay: vec![0.0, 0.0],
            },
            gap_estimates: vec![0.1, 0.1],
            e3_0: 1.0,
            t_k: 0,
            total_steps: 100,
            delay: 1,
            config: ControlConfig { c1: 1.0, c2: 0.0, c3: 0.0, tau_max: 6, ..Default::default() },
        };
        let d = solve_p(&input).unwrap();
        assert_eq!(d.tau, 6);
        assert_eq!(d.alpha, 0.0);
    }
}
