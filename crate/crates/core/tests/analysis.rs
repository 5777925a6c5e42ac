use dfl_core::analysis::{
    alpha_star, compute_constants, eta_max_limit, gamma_limit, interval_bounds_simplified, interval_bounds_tight,
    one_step_bounds, BoundConstants, BoundInputs, DispersionMatrix, ErrorState, TheoryParams,
};
use proptest::prelude::*;

/// Feasible bound inputs with `mu / beta <= 1/2`, or `None` when the drawn
/// fractions land outside a feasibility limit.
fn feasible(
    (ratio, beta, omega, delta, sigma, phi): (f64, f64, f64, f64, f64, f64),
    (tau, delay_frac, eta_frac, gamma_frac, alpha_frac, e3_0): (usize, f64, f64, f64, f64, f64),
) -> Option<BoundConstants> {
    let params = TheoryParams { mu: ratio * beta, beta, omega, delta, sigma, phi };
    let delay = ((tau as f64) * delay_frac) as usize;
    let eta_max = eta_frac * eta_max_limit(&params, tau, delay).ok()?;
    let gamma = gamma_frac * gamma_limit(&params, tau, delay, eta_max).ok()?;
    let alpha = alpha_frac * alpha_star(&params, tau, delay, eta_max, gamma).ok()?;
    compute_constants(&BoundInputs { params, tau, delay, alpha, eta_max, gamma, e3_0 }).ok()
}

fn params() -> impl Strategy<Value = (f64, f64, f64, f64, f64, f64)> {
    (0.02..=0.5f64, 0.2..5.0f64, 0.0..=1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64)
}

fn schedule() -> impl Strategy<Value = (usize, f64, f64, f64, f64, f64)> {
    (2usize..25, 0.0..1.0f64, 0.05..0.99f64, 0.0..0.99f64, 0.0..0.99f64, 0.1..10.0f64)
}

fn state() -> impl Strategy<Value = ErrorState> {
    (0.0..4.0f64, 0.0..2.0f64, 0.0..4.0f64).prop_map(|(e1_sq, e2, e3)| ErrorState { e1_sq, e2, e3 })
}

/// Composes the one-step bounds over one interval and applies the combiner.
fn composed_interval(start: &ErrorState, consts: &BoundConstants, eta: f64) -> ErrorState {
    let inp = &consts.inputs;
    let mut s = *start;
    let mut early = (inp.delay == inp.tau).then_some(s);
    for step in 1..=inp.tau {
        s = one_step_bounds(&s, &inp.params, eta).unwrap();
        if step + inp.delay == inp.tau {
            early = Some(s);
        }
    }
    let early = early.unwrap();
    let a = inp.alpha;
    ErrorState { e1_sq: (1.0 - a) * early.e1_sq + a * s.e1_sq, e2: a * s.e2, e3: (1.0 - a) * early.e3 + a * s.e3 }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn tight_interval_bound_covers_composed_steps(p in params(), sch in schedule(), s in state(), k in 0usize..20) {
        let Some(c) = feasible(p, sch) else { return Ok(()) };
        let eta = c.eta(k);
        let tight = interval_bounds_tight(&s, &c, eta);
        let steps = composed_interval(&s, &c, eta);
        // The dispersion row is exact; the other two are upper bounds.
        prop_assert!(close(tight.e2, steps.e2, 1e-9), "e2 {} vs {}", tight.e2, steps.e2);
        prop_assert!(tight.e3 >= steps.e3 - 1e-9 * (1.0 + steps.e3), "e3 {} < {}", tight.e3, steps.e3);
        prop_assert!(tight.e1_sq >= steps.e1_sq - 1e-12 * (1.0 + steps.e1_sq));
    }

    #[test]
    fn simplified_interval_bound_covers_tight(p in params(), sch in schedule(), s in state(), k in 0usize..20) {
        let Some(c) = feasible(p, sch) else { return Ok(()) };
        let eta = c.eta(k);
        let tight = interval_bounds_tight(&s, &c, eta);
        let simple = interval_bounds_simplified(&s, &c, eta);
        for (name, lo, hi) in [("e1_sq", tight.e1_sq, simple.e1_sq), ("e2", tight.e2, simple.e2), ("e3", tight.e3, simple.e3)] {
            prop_assert!(hi >= lo - 1e-9 * (1.0 + lo.abs()), "{name}: simplified {hi} < tight {lo}");
        }
    }

    #[test]
    fn feasibility_limits_are_ordered(p in params(), sch in schedule()) {
        let Some(c) = feasible(p, sch) else { return Ok(()) };
        let tp = &c.inputs.params;
        prop_assert!(c.eta_limit <= 2.0 / (tp.mu + tp.beta));
        prop_assert!(c.alpha_star > 0.0 && c.alpha_star < 1.0);
        prop_assert!(c.inputs.gamma < c.gamma_limit && c.gamma_limit <= 1.0);
        prop_assert!(c.c3 > 0.0 && c.c1 > c.inputs.gamma);
        prop_assert!([c.y1, c.y2, c.y3].iter().all(|y| y.is_finite() && *y >= 0.0));
    }

    #[test]
    fn gap_bound_strictly_decreases(p in params(), sch in schedule()) {
        let Some(c) = feasible(p, sch) else { return Ok(()) };
        prop_assume!(c.inputs.gamma > 0.0);
        for k in 0..200 {
            prop_assert!(c.theorem_bound(k + 1) < c.theorem_bound(k), "k = {k}");
        }
    }

    #[test]
    fn eigen_coefficients_reproduce_matrix_powers(
        ratio in 0.01..=1.0f64,
        omega in 0.01..=1.0f64,
        eta_beta in 0.0..1.0f64,
        n in 0usize..30,
    ) {
        let d = DispersionMatrix::new(ratio, omega).unwrap();
        let [g1, g2, g3, g4, g5, g6] = d.g();
        // (I + eta_beta B)^n by repeated multiplication.
        let step = [[1.0 + eta_beta * d.b[0][0], eta_beta * d.b[0][1]], [eta_beta * d.b[1][0], 1.0 + eta_beta * d.b[1][1]]];
        let mut m = [[1.0, 0.0], [0.0, 1.0]];
        for _ in 0..n {
            m = [
                [m[0][0] * step[0][0] + m[0][1] * step[1][0], m[0][0] * step[0][1] + m[0][1] * step[1][1]],
                [m[1][0] * step[0][0] + m[1][1] * step[1][0], m[1][0] * step[0][1] + m[1][1] * step[1][1]],
            ];
        }
        let (pp, pm) = (d.pi_plus(eta_beta, n), d.pi_minus(eta_beta, n));
        prop_assert!(close(m[1][1], g1 * pp + g2 * pm, 1e-10));
        prop_assert!(close(m[1][0], g3 * pp + g4 * pm, 1e-10));
        prop_assert!(close(g1 + g2, 1.0, 1e-15) && close(g3 + g4, 0.0, 1e-15));
        // Accumulated drift: sum_{j<n} (I + eta_beta B)^j eta_beta, second row first column.
        let mut acc = 0.0;
        let mut row = [0.0, 1.0];
        for _ in 0..n {
            acc += eta_beta * row[0];
            row = [row[0] * step[0][0] + row[1] * step[1][0], row[0] * step[0][1] + row[1] * step[1][1]];
        }
        prop_assert!(close(acc, g5 * (pp - 1.0) + g6 * (pm - 1.0), 1e-9), "{acc} vs {}", g5 * (pp - 1.0) + g6 * (pm - 1.0));
    }
}

#[test]
fn zero_heterogeneity_and_noise_leave_only_the_initial_gap() {
    let params = TheoryParams { mu: 1.0, beta: 2.0, omega: 0.0, delta: 0.0, sigma: 0.0, phi: 0.0 };
    let eta_max = 0.5 * eta_max_limit(&params, 5, 2).unwrap();
    let gamma = 0.5 * gamma_limit(&params, 5, 2, eta_max).unwrap();
    let c =
        compute_constants(&BoundInputs { params, tau: 5, delay: 2, alpha: 0.0, eta_max, gamma, e3_0: 3.0 }).unwrap();
    assert_eq!(c.y1, 0.0);
    assert_eq!(c.y2, 0.0);
    assert_eq!(c.y3, eta_max * 3.0);
    let want = 2.0 * 9.0 * eta_max.powi(4);
    assert!((c.theorem_bound(0) - want).abs() <= 1e-15 * want);
}

#[test]
fn feasible_draws_are_common() {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::TestRunner;
    let mut runner = TestRunner::deterministic();
    let hits = (0..500)
        .filter(|_| {
            let p = params().new_tree(&mut runner).unwrap().current();
            let s = schedule().new_tree(&mut runner).unwrap().current();
            feasible(p, s).is_some()
        })
        .count();
    assert!(hits > 250, "{hits} of 500");
}
