//! Invariant suites: contraction and eigen facts, one-step and per-interval
//! recursions, the optimality-gap bound and the interval solver.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::analysis::{
    alpha_star, compute_constants, contraction_slack, error_terms, interval_bounds_simplified, interval_bounds_tight,
    one_step_bounds, BoundConstants, BoundInputs, DispersionMatrix, ErrorState, NoiseFreeCompanion, TheoryParams,
};
use crate::control::{evaluate_candidate, select_step_size, solve_p, ControlConfig, ProblemInput};
use crate::engine::{run_training, EngineOptions, EngineState, LocalAggregation, Schedule, StepSizeRule, Trainer};
use crate::error::{DflError, Result};
use crate::fleet::{certify_ridge, FleetTopology, HeterogeneityParams, RidgeCertificate};
use crate::losses::{Dataset, LossModel};
use crate::netcost::CostSnapshot;
use crate::rng;
use crate::vector::{self, ModelVector};

pub const SUITES: [&str; 5] = ["facts", "onestep", "proposition", "theorem", "solver"];

/// Outcome of one check. `slack >= 0` means the inequality held with room.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub slack: f64,
    pub passed: bool,
}

impl Check {
    fn at_least(name: impl Into<String>, slack: f64, tolerance: f64) -> Check {
        Check { name: name.into(), slack, passed: slack >= -tolerance }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    /// Monte Carlo repetitions of the stochastic suites.
    pub seeds: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { seeds: 100, seed: 0 }
    }
}

pub fn run_suite(name: &str, opts: &SuiteOptions) -> Result<Vec<Check>> {
    match name {
        "facts" => facts(opts.seed),
        "onestep" => onestep(opts),
        "proposition" => proposition(),
        "theorem" => theorem(opts),
        "solver" => solver(),
        other => Err(DflError::InvalidInput(format!("unknown suite `{other}`; expected one of {}", SUITES.join(", ")))),
    }
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn gaussian_vec<R: Rng>(r: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            scale * z
        })
        .collect()
}

/// Single-device ridge problem with random data, returned with its exact
/// curvature bounds.
pub fn random_ridge(seed: u64, index: u64) -> Result<(FleetTopology, LossModel, f64, f64)> {
    let mut r = rng::stream(seed, rng::VALIDATION, 1, index);
    let dim = r.random_range(1..=5usize);
    let n = r.random_range(1..=8usize);
    let reg = 0.01 + r.random::<f64>();
    let mut d = Dataset::new(dim);
    for _ in 0..n {
        let x = gaussian_vec(&mut r, dim, 1.0);
        let y: f64 = StandardNormal.sample(&mut r);
        d.push(&x, y)?;
    }
    let topo = FleetTopology::build(vec![d], &[1])?;
    let model = LossModel::ridge(dim, reg);
    let cert = certify_ridge(&topo, &model, 1)?;
    Ok((topo, model, cert.mu, cert.beta))
}

/// `(ratio, omega)` grid of 200 points covering `(0, 1] x [0, 1]`. At
/// `ratio = 1` the omega grid starts above zero, where `lambda_plus`
/// would vanish.
pub fn eigen_grid() -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(200);
    for i in 1..=20 {
        let ratio = i as f64 / 20.0;
        for j in 0..10 {
            let omega = if i == 20 { (j + 1) as f64 / 10.0 } else { j as f64 / 9.0 };
            out.push((ratio, omega));
        }
    }
    out
}

fn facts(seed: u64) -> Result<Vec<Check>> {
    let mut worst = f64::INFINITY;
    for p in 0..1000u64 {
        let (topo, model, mu, beta) = random_ridge(seed, p)?;
        let mut r = rng::stream(seed, rng::VALIDATION, 2, p);
        let eta = (1.0 - r.random::<f64>()) * 2.0 / (mu + beta);
        let dim = model.model_dim();
        let w1 = gaussian_vec(&mut r, dim, 3.0);
        let w2 = gaussian_vec(&mut r, dim, 3.0);
        let g1 = model.gradient(topo.dataset(0), &w1)?;
        let g2 = model.gradient(topo.dataset(0), &w2)?;
        worst = worst.min(contraction_slack(&w1, &w2, &g1, &g2, mu, eta));
    }
    let mut checks = vec![Check::at_least("contraction on 1000 ridge problems", worst, 1e-12)];

    let (mut recon, mut sum_g, mut g34) = (0.0f64, 0.0f64, 0.0f64);
    let (mut lp, mut lm, mut prod) = (f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    let (mut g3_lo, mut g3_hi, mut g56) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY);
    for (ratio, omega) in eigen_grid() {
        let d = DispersionMatrix::new(ratio, omega)?;
        let rec = d.reconstruct();
        for (a, b) in rec.iter().flatten().zip(d.b.iter().flatten()) {
            recon = recon.max((a - b).abs());
        }
        lp = lp.min(d.lambda_plus);
        lm = lm.max(d.lambda_minus);
        prod = prod.max(d.lambda_plus * d.lambda_minus);
        let g = d.g();
        sum_g = sum_g.max((g[0] + g[1] - 1.0).abs());
        g34 = g34.max((g[3] + g[2]).abs());
        g3_lo = g3_lo.min(g[2]);
        g3_hi = g3_hi.max(g[2]);
        g56 = g56.min(g[4].min(g[5]));
    }
    checks.push(Check::at_least("eigendecomposition reproduces the coupling matrix", 1e-12 - recon, 0.0));
    checks.push(Check { name: "lambda_plus > 0".into(), slack: lp, passed: lp > 0.0 });
    checks.push(Check { name: "lambda_minus < 0".into(), slack: -lm, passed: lm < 0.0 });
    checks.push(Check::at_least("lambda_plus * lambda_minus <= 0", -prod, 0.0));
    checks.push(Check::at_least("g1 + g2 = 1", 1e-12 - sum_g, 0.0));
    checks.push(Check::at_least("g4 = -g3", 1e-12 - g34, 0.0));
    checks.push(Check::at_least("g3 in [1/3, 1]", (g3_lo - 1.0 / 3.0).min(1.0 - g3_hi), 1e-15));
    checks.push(Check::at_least("g5, g6 >= 0", g56, 0.0));
    Ok(checks)
}

/// Three subnets of two devices each on a 2-dim ridge problem.
pub fn three_subnet_ridge() -> Result<(FleetTopology, LossModel)> {
    let mut r = rng::stream(11, rng::VALIDATION, 3, 0);
    let mut sets = Vec::new();
    for c in 0..3 {
        let shift = [c as f64 - 1.0, 0.5 * c as f64];
        for _ in 0..2 {
            let mut d = Dataset::new(2);
            for _ in 0..6 {
                let x = gaussian_vec(&mut r, 2, 1.0);
                let z: f64 = StandardNormal.sample(&mut r);
                let y = 2.0 * x[0] - x[1] + shift[0] * x[0] + shift[1] * x[1] + 0.3 * z;
                d.push(&x, y)?;
            }
            sets.push(d);
        }
    }
    Ok((FleetTopology::build(sets, &[2, 2, 2])?, LossModel::ridge(2, 0.2)))
}

/// Two devices, each alone in its subnet and each with a single feature
/// vector, so the minibatch noise is known exactly.
pub fn two_device_toy() -> Result<(FleetTopology, LossModel)> {
    let xs = [[1.0, 0.5], [0.4, 1.1]];
    let ys = [[2.0, -1.0, 0.5, 1.5, 0.0, 3.0], [1.0, 0.0, -0.5, 2.5, -2.0, 0.5]];
    let mut sets = Vec::new();
    for c in 0..2 {
        let mut d = Dataset::new(2);
        for y in ys[c] {
            d.push(&xs[c], y)?;
        }
        sets.push(d);
    }
    Ok((FleetTopology::build(sets, &[1, 1])?, LossModel::ridge(2, 0.5)))
}

/// Two subnets of two identical devices with one feature vector per
/// subnet; every constant of the bound is known exactly.
pub fn certified_toy() -> Result<(FleetTopology, LossModel)> {
    let xs = [[1.0, 0.5], [0.3, 1.2]];
    let ys = [[1.0, 2.0, 0.5, 1.5, 3.0, 0.0], [-1.0, 0.5, -0.5, 0.0, -2.0, 1.0]];
    let mut sets = Vec::new();
    for c in 0..2 {
        for _ in 0..2 {
            let mut d = Dataset::new(2);
            for y in ys[c] {
                d.push(&xs[c], y)?;
            }
            sets.push(d);
        }
    }
    Ok((FleetTopology::build(sets, &[2, 2])?, LossModel::ridge(2, 0.5)))
}

pub fn certified_params(cert: &RidgeCertificate) -> HeterogeneityParams {
    HeterogeneityParams {
        mu: cert.mu,
        beta: cert.beta,
        delta: cert.delta,
        zeta: cert.zeta,
        delta_c: cert.delta_c.clone(),
        zeta_c: cert.zeta_c.clone(),
        sigma: cert.sigma.unwrap_or(0.0),
        phi: 0.0,
    }
}

/// Noise-free companion over `steps` plain gradient steps, checking the
/// one-step bounds on the subnet dispersion and the optimality gap.
pub fn noise_free_one_step_slack(
    topology: &FleetTopology,
    model: &LossModel,
    params: &TheoryParams,
    optimum: &[f64],
    start: &[f64],
    eta: f64,
    steps: usize,
) -> Result<(f64, f64)> {
    let mut comp = NoiseFreeCompanion::new(topology.num_subnets(), start);
    let expand = |c: &NoiseFreeCompanion| -> Vec<ModelVector> {
        (0..topology.num_devices()).map(|i| c.subnet_models[topology.subnet_of(i)].clone()).collect()
    };
    let mut state = error_terms(topology, &expand(&comp), &comp, optimum);
    let (mut s2, mut s3) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..steps {
        let bound = one_step_bounds(&state, params, eta)?;
        comp.step(topology, model, eta)?;
        state = error_terms(topology, &expand(&comp), &comp, optimum);
        s2 = s2.min(bound.e2 - state.e2);
        s3 = s3.min(bound.e3 - state.e3);
    }
    Ok((s2, s3))
}

/// Per-step paired differences `e1^2(t+1) - bound(e1^2(t))` for the two-device
/// toy, one vector per step, each with one entry per seed.
pub fn stochastic_e1_differences(seeds: usize, steps: usize, batch: usize) -> Result<Vec<Vec<f64>>> {
    let (topo, model) = two_device_toy()?;
    let cert = certify_ridge(&topo, &model, batch)?;
    let params = TheoryParams::from(&certified_params(&cert));
    let eta = 0.5 * 2.0 / (params.mu + params.beta);
    let start = vec![3.0, -2.0];
    let mut diffs = vec![Vec::with_capacity(seeds); steps];
    for s in 0..seeds as u64 {
        let mut state = EngineState::new(&topo, &start);
        let mut comp = NoiseFreeCompanion::new(topo.num_subnets(), &start);
        let mut prev = error_terms(&topo, &state.local, &comp, &cert.optimum);
        for diff in diffs.iter_mut() {
            let bound = one_step_bounds(&prev, &params, eta)?;
            state.local_sgd_step(&topo, &model, eta, batch, s)?;
            state.local_aggregate(&topo, &[false, false]);
            comp.step(&topo, &model, eta)?;
            let now = error_terms(&topo, &state.local, &comp, &cert.optimum);
            diff.push(now.e1_sq - bound.e1_sq);
            prev = now;
        }
    }
    Ok(diffs)
}

fn onestep(opts: &SuiteOptions) -> Result<Vec<Check>> {
    let (topo, model) = three_subnet_ridge()?;
    let cert = certify_ridge(&topo, &model, 1)?;
    let params = TheoryParams::from(&certified_params(&cert));
    let eta = 0.8 * 2.0 / (params.mu + params.beta);
    let (s2, s3) = noise_free_one_step_slack(&topo, &model, &params, &cert.optimum, &[4.0, -3.0], eta, 500)?;
    let mut checks = vec![
        Check::at_least("subnet dispersion one-step bound, 500 steps", s2, 1e-9),
        Check::at_least("optimality gap one-step bound, 500 steps", s3, 1e-9),
    ];
    let diffs = stochastic_e1_differences(opts.seeds.max(2), 30, 2)?;
    let worst = diffs
        .iter()
        .map(|d| {
            let (m, se) = mean_and_stderr(d);
            3.0 * se - m
        })
        .fold(f64::INFINITY, f64::min);
    checks.push(Check::at_least(
        format!("local dispersion one-step bound, {} seeds (3 sigma)", opts.seeds.max(2)),
        worst,
        0.0,
    ));
    Ok(checks)
}

/// Bound constants of the certified toy at `tau = 4`, `delay = 1`, with
/// `alpha` at half its limit.
pub fn certified_setup() -> Result<(FleetTopology, LossModel, RidgeCertificate, BoundConstants)> {
    let (topo, model) = certified_toy()?;
    let batch = 2;
    let cert = certify_ridge(&topo, &model, batch)?;
    let theory = TheoryParams::from(&certified_params(&cert));
    let (tau, delay) = (4, 1);
    let (eta_max, gamma) = select_step_size(&theory, tau, delay, 0.9)?;
    let a_star = alpha_star(&theory, tau, delay, eta_max, gamma)?;
    let consts = compute_constants(&BoundInputs {
        params: theory,
        tau,
        delay,
        alpha: 0.5 * a_star,
        eta_max,
        gamma,
        e3_0: vector::norm(&cert.optimum),
    })?;
    Ok((topo, model, cert, consts))
}

fn proposition() -> Result<Vec<Check>> {
    let (topo, model, cert, consts) = certified_setup()?;
    let inp = consts.inputs;
    let mut comp = NoiseFreeCompanion::new(topo.num_subnets(), &[0.0, 0.0]);
    let expand = |c: &NoiseFreeCompanion| -> Vec<ModelVector> {
        (0..topo.num_devices()).map(|i| c.subnet_models[topo.subnet_of(i)].clone()).collect()
    };
    let mut state = error_terms(&topo, &expand(&comp), &comp, &cert.optimum);
    let (mut s2, mut s3, mut order) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for k in 0..50 {
        let eta = consts.eta(k);
        let probe = ErrorState { e1_sq: state.e3 * state.e3, ..state };
        let tight = interval_bounds_tight(&probe, &consts, eta);
        let simple = interval_bounds_simplified(&probe, &consts, eta);
        order = order.min(simple.e1_sq - tight.e1_sq).min(simple.e2 - tight.e2).min(simple.e3 - tight.e3);
        let mut snap = None;
        for step in 1..=inp.tau {
            comp.step(&topo, &model, eta)?;
            if step + inp.delay == inp.tau {
                snap = Some(comp.global(&topo));
            }
        }
        comp.sync(inp.alpha, snap.as_deref().unwrap_or(&comp.global(&topo)));
        state = error_terms(&topo, &expand(&comp), &comp, &cert.optimum);
        s2 = s2.min(tight.e2 - state.e2);
        s3 = s3.min(tight.e3 - state.e3);
    }
    Ok(vec![
        Check::at_least("interval bound on subnet dispersion, 50 intervals", s2, 1e-9),
        Check::at_least("interval bound on optimality gap, 50 intervals", s3, 1e-9),
        Check::at_least("simplified interval bound >= tight", order, 1e-9),
    ])
}

/// Mean of `|w_bar(t_k) - w*|^2` over `seeds` runs of the certified toy,
/// with its standard error, for `k = 0..=syncs`.
pub fn certified_gap_trajectory(seeds: usize, syncs: usize) -> Result<(BoundConstants, Vec<(f64, f64)>)> {
    let (topo, model, cert, consts) = certified_setup()?;
    let inp = consts.inputs;
    let total = inp.tau * (syncs + 1);
    let schedule = Schedule::periodic(
        total,
        inp.tau,
        inp.delay,
        inp.alpha,
        StepSizeRule { eta_max: inp.eta_max, gamma: inp.gamma },
        LocalAggregation::Never,
    );
    let mut per_k = vec![Vec::with_capacity(seeds); syncs + 1];
    for s in 0..seeds as u64 {
        let options = EngineOptions { seed: s, batch_size: 2, metrics_every: inp.tau, ..Default::default() };
        let mut trainer = Trainer::new(&topo, model, options);
        trainer.optimum = Some(cert.optimum.clone());
        let out = run_training(&trainer, &schedule)?;
        per_k[0].push(vector::dist_sq(&[0.0, 0.0], &cert.optimum));
        for row in &out.metrics {
            let k = row.t / inp.tau;
            if k >= 1 && k <= syncs {
                per_k[k].push(row.gap.unwrap_or(f64::NAN));
            }
        }
    }
    Ok((consts, per_k.iter().map(|v| mean_and_stderr(v)).collect()))
}

fn theorem(opts: &SuiteOptions) -> Result<Vec<Check>> {
    let (consts, traj) = certified_gap_trajectory(opts.seeds.max(2), 50)?;
    let dominated = traj
        .iter()
        .enumerate()
        .map(|(k, (m, se))| consts.theorem_bound(k) - (m - 3.0 * se))
        .fold(f64::INFINITY, f64::min);
    let decreasing =
        (0..50).map(|k| consts.theorem_bound(k) - consts.theorem_bound(k + 1)).fold(f64::INFINITY, f64::min);
    Ok(vec![
        Check::at_least(format!("bound dominates mean gap for k <= 50 ({} seeds)", opts.seeds.max(2)), dominated, 0.0),
        Check { name: "bound strictly decreasing in k".into(), slack: decreasing, passed: decreasing > 0.0 },
    ])
}

/// A small decision problem with a generous combiner limit.
pub fn coarse_problem() -> ProblemInput {
    ProblemInput {
        params: HeterogeneityParams {
            mu: 1.0,
            beta: 1.25,
            delta: 0.05,
            zeta: 0.02,
            delta_c: vec![0.3, 0.1, 0.5],
            zeta_c: vec![0.01; 3],
            sigma: 0.2,
            phi: 0.4,
        },
        subnet_weights: vec![0.5, 0.3, 0.2],
        costs: CostSnapshot {
            global_energy: 2.0,
            global_delay: 0.3,
            local_energy: vec![0.02, 0.05, 0.03],
            local_delay: vec![0.01, 0.02, 0.015],
        },
        gap_estimates: vec![0.5, 1.0, 0.2],
        e3_0: 3.0,
        t_k: 0,
        total_steps: 60,
        delay: 2,
        config: ControlConfig { tau_min: None, tau_max: 7, alpha_step: 0.25, ..Default::default() },
    }
}

fn solver() -> Result<Vec<Check>> {
    let input = coarse_problem();
    let got = solve_p(&input)?;
    let theory = TheoryParams::from(&input.params);
    let mut best: Option<(f64, usize, f64)> = None;
    let mut grid_min = f64::INFINITY;
    let mut points = 0usize;
    for tau in input.delay + 1..=input.config.tau_max {
        let Ok((eta, gamma)) = select_step_size(&theory, tau, input.delay, input.config.safety) else { continue };
        let Ok(limit) = alpha_star(&theory, tau, input.delay, eta, gamma) else { continue };
        for j in 0..4 {
            let alpha = j as f64 * 0.25;
            if alpha >= limit {
                break;
            }
            if let Some((obj, _, _)) = evaluate_candidate(&input, tau, alpha) {
                points += 1;
                grid_min = grid_min.min(obj);
                if best.is_none_or(|(b, _, _)| obj < b) {
                    best = Some((obj, tau, alpha));
                }
            }
        }
    }
    let matches = best.is_some_and(|(o, t, a)| o == got.objective && t == got.tau && a == got.alpha);
    Ok(vec![
        Check { name: format!("solver matches brute force over {points} grid points"), slack: 0.0, passed: matches },
        Check::at_least("decision is grid-optimal", grid_min - got.objective, 0.0),
        Check {
            name: "decision within tau and alpha limits".into(),
            slack: got.alpha_star - got.alpha,
            passed: got.tau <= input.config.tau_max.min(input.total_steps - input.t_k) && got.alpha < got.alpha_star,
        },
    ])
}
