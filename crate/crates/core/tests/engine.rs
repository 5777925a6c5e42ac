use dfl_core::engine::{
    run_baseline, run_training, Baseline, EngineOptions, IntervalPlan, LocalAggregation, Schedule, StepSizeRule,
    Trainer,
};
use dfl_core::fleet::FleetTopology;
use dfl_core::losses::{Dataset, LossModel};
use dfl_core::metrics::EventKind;
use dfl_core::{rng, DflError};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

/// Devices with uneven dataset sizes so the aggregation weights differ.
fn fleet(seed: u64, sizes: &[usize], classes: Option<usize>) -> FleetTopology {
    let n: usize = sizes.iter().sum();
    let datasets = (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, 400, i as u64, 0);
            let mut d = Dataset::new(3);
            for j in 0..(3 + 2 * i) {
                let x: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut r)).collect();
                let y = match classes {
                    Some(l) => ((i + j) % l) as f64,
                    None => x[0] - 0.5 * x[2] + i as f64 * 0.3,
                };
                d.push(&x, y).unwrap();
            }
            d
        })
        .collect();
    FleetTopology::build(datasets, sizes).unwrap()
}

fn aggregates(local: &LocalAggregation, c: usize, t: usize, t_start: usize) -> bool {
    match local {
        LocalAggregation::Always => true,
        LocalAggregation::Every { period } => (t - t_start).is_multiple_of(*period),
        LocalAggregation::Instants { per_subnet } => per_subnet[c].contains(&t),
        _ => false,
    }
}

/// Straight-line version of the protocol with weights taken from dataset
/// sizes. Returns the final local models.
fn reference(
    sizes: &[usize],
    data: &[Dataset],
    model: &LossModel,
    schedule: &Schedule,
    seed: u64,
    batch: usize,
) -> Vec<Vec<f64>> {
    let mut members = Vec::new();
    let mut next = 0;
    for &s in sizes {
        members.push((next..next + s).collect::<Vec<_>>());
        next += s;
    }
    let total_points: usize = data.iter().map(Dataset::len).sum();
    let dim = model.model_dim();
    let mut w = vec![vec![0.0; dim]; data.len()];
    let mut tent = w.clone();
    let mut snap = vec![0.0; dim];
    let (mut k, mut t_start) = (0, 0);
    for t in 1..=schedule.total_steps {
        let plan = &schedule.intervals[k];
        let t_next = t_start + plan.tau;
        for i in 0..data.len() {
            let mut r = rng::sampling(seed, i, t - 1);
            let g = model.stochastic_gradient(&data[i], &w[i], batch.min(data[i].len()), &mut r).unwrap();
            tent[i] = (0..dim).map(|j| w[i][j] - plan.eta * g[j]).collect();
        }
        for (c, m) in members.iter().enumerate() {
            let subnet_points: usize = m.iter().map(|&i| data[i].len()).sum();
            let mut avg = vec![0.0; dim];
            for &i in m {
                for j in 0..dim {
                    avg[j] += data[i].len() as f64 / subnet_points as f64 * tent[i][j];
                }
            }
            let on = aggregates(&plan.local, c, t, t_start);
            for &i in m {
                w[i] = if on { avg.clone() } else { tent[i].clone() };
            }
        }
        if t + plan.delay == t_next {
            snap = vec![0.0; dim];
            for i in 0..data.len() {
                for j in 0..dim {
                    snap[j] += data[i].len() as f64 / total_points as f64 * tent[i][j];
                }
            }
        }
        if t == t_next && t != schedule.total_steps {
            for wi in &mut w {
                for j in 0..dim {
                    wi[j] = (1.0 - plan.alpha) * snap[j] + plan.alpha * wi[j];
                }
            }
            k += 1;
            t_start = t;
        }
    }
    w
}

fn mixed_schedule() -> Schedule {
    let plan = |tau, delay, alpha, eta, local| IntervalPlan { tau, delay, up_delay: 0, alpha, eta, local };
    Schedule {
        total_steps: 23,
        intervals: vec![
            plan(5, 2, 0.3, 0.08, LocalAggregation::Every { period: 2 }),
            plan(7, 0, 0.0, 0.06, LocalAggregation::Instants { per_subnet: vec![vec![6, 9], vec![], vec![12]] }),
            plan(4, 3, 0.9, 0.05, LocalAggregation::Always),
            plan(8, 1, 0.5, 0.04, LocalAggregation::Never),
        ],
    }
}

#[test]
fn engine_matches_reference_protocol() {
    let sizes = [2, 3, 1];
    for (classes, model) in [(None, LossModel::ridge(3, 0.1)), (Some(3), LossModel::svm(3, 3, 0.05))] {
        let topo = fleet(11, &sizes, classes);
        let schedule = mixed_schedule();
        let options = EngineOptions { seed: 5, batch_size: 3, ..Default::default() };
        let out = run_training(&Trainer::new(&topo, model, options), &schedule).unwrap();
        let want = reference(&sizes, topo.datasets(), &model, &schedule, 5, 3);
        for (got, exp) in out.local_models.iter().zip(&want) {
            for (a, b) in got.iter().zip(exp) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
        // Intervals end at 5, 12, 16 and 24; the run stops at 23, right at the last capture.
        let globals: Vec<usize> = out.events.iter().filter(|e| e.kind == EventKind::Global).map(|e| e.t).collect();
        assert_eq!(globals, vec![3, 12, 13, 23]);
        let locals = out.events.iter().filter(|e| e.kind == EventKind::Local).count();
        // t = 2, 4 in all three subnets, then the three instants, then four steps in all three subnets.
        assert_eq!(locals, 2 * 3 + 3 + 4 * 3);
        assert_eq!(out.intervals.iter().map(|r| r.t_start).collect::<Vec<_>>(), vec![0, 5, 12, 16]);
    }
}

#[test]
fn fedavg_equals_hierarchical_without_local_rounds() {
    let topo = fleet(3, &[2, 2, 2], None);
    let model = LossModel::ridge(3, 0.2);
    let schedule =
        Schedule::periodic(30, 6, 2, 0.4, StepSizeRule { eta_max: 0.05, gamma: 0.1 }, LocalAggregation::Always);
    let trainer = Trainer::new(&topo, model, EngineOptions { seed: 9, batch_size: 2, ..Default::default() });
    let flat = run_baseline(&trainer, Baseline::FedAvg, &schedule).unwrap();
    let mut never = schedule.clone();
    for p in &mut never.intervals {
        p.local = LocalAggregation::Never;
    }
    let hier = run_baseline(&trainer, Baseline::HierarchicalFedAvg, &never).unwrap();
    for (a, b) in flat.final_model.iter().zip(&hier.final_model) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
    }
    assert!(flat.intervals.iter().all(|r| r.alpha == 0.0 && r.local_aggregations == vec![0]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn runs_are_deterministic(seed in 0u64..1000, every in 1usize..9, total in 1usize..40) {
        let topo = fleet(seed, &[2, 1], None);
        let schedule = Schedule::periodic(total, 5, 2, 0.5, StepSizeRule { eta_max: 0.05, gamma: 0.0 }, LocalAggregation::Every { period: 2 });
        let options = EngineOptions { seed, batch_size: 2, metrics_every: every, ..Default::default() };
        let trainer = Trainer::new(&topo, LossModel::ridge(3, 0.1), options);
        let a = run_training(&trainer, &schedule).unwrap();
        let b = run_training(&trainer, &schedule).unwrap();
        prop_assert_eq!(&a, &b);
        let rows = total / every + usize::from(total % every != 0);
        prop_assert_eq!(a.metrics.len(), rows);
        prop_assert_eq!(a.metrics.last().unwrap().t, total);
        let other = Trainer::new(&topo, LossModel::ridge(3, 0.1), EngineOptions { seed: seed + 1, batch_size: 2, metrics_every: every, ..Default::default() });
        let c = run_training(&other, &schedule).unwrap();
        prop_assert_ne!(a.final_model, c.final_model);
    }
}

#[test]
fn invalid_schedules_are_rejected() {
    let topo = fleet(1, &[2], None);
    let trainer = Trainer::new(&topo, LossModel::ridge(3, 0.1), EngineOptions::default());
    let rule = StepSizeRule { eta_max: 0.1, gamma: 0.0 };
    let base = Schedule::periodic(10, 5, 1, 0.2, rule, LocalAggregation::Never);
    let mut cases = Vec::new();
    let mut s = base.clone();
    s.intervals[0].delay = 5;
    cases.push(s);
    let mut s = base.clone();
    s.intervals.pop();
    cases.push(s);
    let mut s = base.clone();
    s.intervals[1].alpha = 1.0;
    cases.push(s);
    let mut s = base.clone();
    s.intervals[0].up_delay = 2;
    cases.push(s);
    let mut s = base.clone();
    s.intervals[0].eta = 0.0;
    cases.push(s);
    let mut s = base.clone();
    s.intervals[0].local = LocalAggregation::Every { period: 0 };
    cases.push(s);
    let mut s = base.clone();
    s.total_steps = 0;
    cases.push(s);
    for s in cases {
        assert!(matches!(run_training(&trainer, &s), Err(DflError::InvalidSchedule(_))), "{s:?}");
    }
    let ablation = Trainer::new(
        &topo,
        LossModel::ridge(3, 0.1),
        EngineOptions { allow_full_combiner: true, ..Default::default() },
    );
    let mut s = base.clone();
    s.intervals[1].alpha = 1.0;
    assert!(run_training(&ablation, &s).is_ok());
    let wrong_dim = Trainer::new(&topo, LossModel::ridge(2, 0.1), EngineOptions::default());
    assert!(matches!(run_training(&wrong_dim, &base), Err(DflError::DimensionMismatch { .. })));
}
