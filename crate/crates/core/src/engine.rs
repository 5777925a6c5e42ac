//! Delay-aware hierarchical training.
//!
//! Every device takes a minibatch SGD step per time index. Subnets may
//! average their tentative models at local aggregation instants. The cloud
//! captures the global average `delay` steps before each sync and, at the
//! sync, every device replaces its model with
//! `(1 - alpha) * captured + alpha * local`.

use serde::{Deserialize, Serialize};

use crate::analysis::NoiseFreeCompanion;
use crate::error::{DflError, Result};
use crate::fleet::FleetTopology;
use crate::losses::{LossModel, WeightedObjective};
use crate::metrics::{CostEvent, EventKind, IntervalRecord, MetricsRow};
use crate::netcost::CostModel;
use crate::rng;
use crate::vector::{self, ModelVector};

/// Which time indices of an interval trigger a subnet aggregation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LocalAggregation {
    Never,
    Always,
    /// Every `period` steps counted from the start of the interval.
    Every {
        period: usize,
    },
    /// Absolute time indices, one list per subnet.
    Instants {
        per_subnet: Vec<Vec<usize>>,
    },
    /// Decided online by the interval source.
    Triggered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalPlan {
    pub tau: usize,
    /// Steps between the global capture and the sync.
    pub delay: usize,
    /// Uplink share of `delay`.
    pub up_delay: usize,
    pub alpha: f64,
    pub eta: f64,
    pub local: LocalAggregation,
}

impl IntervalPlan {
    pub fn validate(&self, allow_full_combiner: bool) -> Result<()> {
        if self.tau == 0 {
            return Err(DflError::InvalidSchedule("tau must be at least 1".into()));
        }
        if self.delay >= self.tau {
            return Err(DflError::InvalidSchedule(format!(
                "delay {} must be at most tau - 1 = {}",
                self.delay,
                self.tau - 1
            )));
        }
        if self.up_delay > self.delay {
            return Err(DflError::InvalidSchedule("up_delay exceeds delay".into()));
        }
        let alpha_ok =
            if allow_full_combiner { (0.0..=1.0).contains(&self.alpha) } else { (0.0..1.0).contains(&self.alpha) };
        if !alpha_ok {
            return Err(DflError::InvalidSchedule(format!("alpha {} outside the allowed range", self.alpha)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(DflError::InvalidSchedule("eta must be positive and finite".into()));
        }
        if let LocalAggregation::Every { period } = self.local {
            if period == 0 {
                return Err(DflError::InvalidSchedule("local aggregation period must be positive".into()));
            }
        }
        Ok(())
    }

    fn aggregates(&self, c: usize, t: usize, t_start: usize) -> bool {
        match &self.local {
            LocalAggregation::Never | LocalAggregation::Triggered => false,
            LocalAggregation::Always => true,
            LocalAggregation::Every { period } => (t - t_start).is_multiple_of(*period),
            LocalAggregation::Instants { per_subnet } => per_subnet.get(c).is_some_and(|v| v.contains(&t)),
        }
    }
}

/// Step sizes `eta_max / (1 + gamma k)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSizeRule {
    pub eta_max: f64,
    #[serde(default)]
    pub gamma: f64,
}

impl StepSizeRule {
    pub fn eta(&self, k: usize) -> f64 {
        self.eta_max / (1.0 + self.gamma * k as f64)
    }
}

/// A fully specified sequence of global intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_steps: usize,
    pub intervals: Vec<IntervalPlan>,
}

impl Schedule {
    /// Identical intervals of length `tau` until `total_steps` is covered.
    pub fn periodic(
        total_steps: usize,
        tau: usize,
        delay: usize,
        alpha: f64,
        steps: StepSizeRule,
        local: LocalAggregation,
    ) -> Schedule {
        let count = total_steps.div_ceil(tau.max(1));
        let intervals = (0..count)
            .map(|k| IntervalPlan {
                tau,
                delay,
                up_delay: delay - delay / 2,
                alpha,
                eta: steps.eta(k),
                local: local.clone(),
            })
            .collect();
        Schedule { total_steps, intervals }
    }

    pub fn validate(&self, allow_full_combiner: bool) -> Result<()> {
        if self.total_steps == 0 {
            return Err(DflError::InvalidSchedule("total_steps must be positive".into()));
        }
        for p in &self.intervals {
            p.validate(allow_full_combiner)?;
        }
        let covered: usize = self.intervals.iter().map(|p| p.tau).sum();
        if covered < self.total_steps {
            return Err(DflError::InvalidSchedule(format!(
                "intervals cover {covered} steps, fewer than total_steps = {}",
                self.total_steps
            )));
        }
        Ok(())
    }

    /// Sync instants `t_k`, starting with `t_0 = 0`.
    pub fn sync_times(&self) -> Vec<usize> {
        let mut out = vec![0];
        let mut t = 0;
        for p in &self.intervals {
            t += p.tau;
            if t > self.total_steps {
                break;
            }
            out.push(t);
        }
        out
    }
}

/// State visible when the next interval is decided, at the capture instant.
pub struct DecisionContext<'a> {
    /// Index of the interval being completed.
    pub k: usize,
    pub t: usize,
    pub next_sync: usize,
    pub total_steps: usize,
    /// Tentative device models uploaded at the capture.
    pub uploads: &'a [ModelVector],
    pub snapshot: &'a [f64],
    pub current: &'a IntervalPlan,
}

/// State visible to an online local-aggregation trigger.
pub struct TriggerContext<'a> {
    pub t: usize,
    pub k: usize,
    /// `sum_i rho_i w_tilde_i` per subnet.
    pub subnet_aggregates: &'a [ModelVector],
}

/// Supplies interval plans, either from a fixed schedule or online.
pub trait IntervalSource {
    fn first_interval(&mut self, start: &[f64]) -> Result<IntervalPlan>;
    fn next_interval(&mut self, ctx: &DecisionContext<'_>) -> Result<IntervalPlan>;
    fn trigger(&mut self, ctx: &TriggerContext<'_>) -> Result<Vec<bool>> {
        Ok(vec![false; ctx.subnet_aggregates.len()])
    }
}

pub struct FixedSchedule {
    schedule: Schedule,
}

impl FixedSchedule {
    pub fn new(schedule: Schedule) -> Self {
        FixedSchedule { schedule }
    }
}

impl IntervalSource for FixedSchedule {
    fn first_interval(&mut self, _start: &[f64]) -> Result<IntervalPlan> {
        self.schedule.intervals.first().cloned().ok_or_else(|| DflError::InvalidSchedule("no intervals".into()))
    }

    fn next_interval(&mut self, ctx: &DecisionContext<'_>) -> Result<IntervalPlan> {
        self.schedule
            .intervals
            .get(ctx.k + 1)
            .cloned()
            .ok_or_else(|| DflError::InvalidSchedule(format!("no plan for interval {}", ctx.k + 1)))
    }
}

/// Device models between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineState {
    /// Number of completed steps.
    pub t: usize,
    pub local: Vec<ModelVector>,
    pub tentative: Vec<ModelVector>,
    pub theta: Vec<bool>,
    pub snapshot: Option<ModelVector>,
}

impl EngineState {
    pub fn new(topology: &FleetTopology, start: &[f64]) -> Self {
        EngineState {
            t: 0,
            local: vec![start.to_vec(); topology.num_devices()],
            tentative: vec![start.to_vec(); topology.num_devices()],
            theta: vec![false; topology.num_subnets()],
            snapshot: None,
        }
    }

    /// `w_tilde_i = w_i - eta g_hat_i` for every device; minibatches come from
    /// the `(seed, device, t)` sampling stream.
    pub fn local_sgd_step(
        &mut self,
        topology: &FleetTopology,
        model: &LossModel,
        eta: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<()> {
        for i in 0..topology.num_devices() {
            let mut stream = rng::sampling(seed, i, self.t);
            let data = topology.dataset(i);
            let g = model.stochastic_gradient(data, &self.local[i], batch_size.min(data.len()), &mut stream)?;
            let w = &self.local[i];
            self.tentative[i] = w.iter().zip(&g).map(|(a, b)| a - eta * b).collect();
        }
        self.t += 1;
        Ok(())
    }

    pub fn subnet_aggregates(&self, topology: &FleetTopology) -> Vec<ModelVector> {
        (0..topology.num_subnets()).map(|c| topology.subnet_average(c, &self.tentative)).collect()
    }

    /// Members of subnets with `theta[c]` take the subnet aggregate; the rest
    /// keep their tentative model.
    pub fn local_aggregate(&mut self, topology: &FleetTopology, theta: &[bool]) {
        for c in 0..topology.num_subnets() {
            let agg = theta[c].then(|| topology.subnet_average(c, &self.tentative));
            for &i in topology.members(c) {
                self.local[i] = match &agg {
                    Some(a) => a.clone(),
                    None => self.tentative[i].clone(),
                };
            }
        }
        self.theta = theta.to_vec();
    }

    /// Records and returns `sum_c varrho_c sum_i rho_i w_tilde_i`.
    pub fn capture_global_snapshot(&mut self, topology: &FleetTopology) -> ModelVector {
        let snap = topology.global_average_of_subnets(&self.subnet_aggregates(topology));
        self.snapshot = Some(snap.clone());
        snap
    }

    /// `w_i = (1 - alpha) snapshot + alpha w_i`, where `w_i` already holds the
    /// subnet aggregate if the subnet aggregated at this instant.
    pub fn global_synchronize(&mut self, alpha: f64) -> Result<()> {
        let snap =
            self.snapshot.take().ok_or_else(|| DflError::InvalidSchedule("sync without a captured snapshot".into()))?;
        for w in &mut self.local {
            *w = vector::convex_combination(&snap, w, alpha);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineOptions {
    pub seed: u64,
    pub batch_size: usize,
    /// Permits `alpha = 1`, which removes global information entirely.
    pub allow_full_combiner: bool,
    /// Emit a metrics row every this many steps (the last step always).
    pub metrics_every: usize,
    /// Run the noise-free companion and report `e1`, `e2`, `e3`.
    pub track_errors: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions { seed: 0, batch_size: 16, allow_full_combiner: false, metrics_every: 1, track_errors: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRow>,
    pub events: Vec<CostEvent>,
    pub intervals: Vec<IntervalRecord>,
    pub final_model: ModelVector,
    pub final_loss: f64,
    pub final_gap: Option<f64>,
    pub local_models: Vec<ModelVector>,
}

/// Everything a run needs besides its interval source.
pub struct Trainer<'a> {
    pub topology: &'a FleetTopology,
    pub model: LossModel,
    pub options: EngineOptions,
    pub initial_model: Option<ModelVector>,
    pub optimum: Option<ModelVector>,
    pub costs: Option<&'a CostModel>,
}

impl<'a> Trainer<'a> {
    pub fn new(topology: &'a FleetTopology, model: LossModel, options: EngineOptions) -> Self {
        Trainer { topology, model, options, initial_model: None, optimum: None, costs: None }
    }

    pub fn run(&self, source: &mut dyn IntervalSource, total_steps: usize) -> Result<RunOutput> {
        let topo = self.topology;
        let model = &self.model;
        model.validate()?;
        if topo.feature_dim() != model.feature_dim {
            return Err(DflError::DimensionMismatch { expected: model.feature_dim, got: topo.feature_dim() });
        }
        if total_steps == 0 {
            return Err(DflError::InvalidSchedule("total_steps must be positive".into()));
        }
        if self.options.batch_size == 0 {
            return Err(DflError::InvalidInput("batch_size must be positive".into()));
        }
        let dim = model.model_dim();
        let start = self.initial_model.clone().unwrap_or_else(|| vec![0.0; dim]);
        if start.len() != dim {
            return Err(DflError::DimensionMismatch { expected: dim, got: start.len() });
        }
        if let Some(o) = &self.optimum {
            if o.len() != dim {
                return Err(DflError::DimensionMismatch { expected: dim, got: o.len() });
            }
        }
        let global: WeightedObjective<'_> = topo.global_objective(model)?;
        let n_sub = topo.num_subnets();

        let mut state = EngineState::new(topo, &start);
        let mut companion = self.options.track_errors.then(|| NoiseFreeCompanion::new(n_sub, &start));
        let mut companion_snapshot: Option<ModelVector> = None;

        let mut plan = source.first_interval(&start)?;
        plan.validate(self.options.allow_full_combiner)?;
        let mut next_plan: Option<IntervalPlan> = None;
        let mut k = 0;
        let mut t_start = 0;
        let mut local_counts = vec![0usize; n_sub];

        let mut metrics = Vec::new();
        let mut events = Vec::new();
        let mut intervals = Vec::new();
        let mut cum_energy = 0.0;
        let mut cum_delay = 0.0;
        let mut event_index: u64 = 0;

        for t in 1..=total_steps {
            let t_next = t_start + plan.tau;
            state.local_sgd_step(topo, model, plan.eta, self.options.batch_size, self.options.seed)?;

            let theta: Vec<bool> = if matches!(plan.local, LocalAggregation::Triggered) {
                let aggs = state.subnet_aggregates(topo);
                let th = source.trigger(&TriggerContext { t, k, subnet_aggregates: &aggs })?;
                if th.len() != n_sub {
                    return Err(DflError::DimensionMismatch { expected: n_sub, got: th.len() });
                }
                th
            } else {
                (0..n_sub).map(|c| plan.aggregates(c, t, t_start)).collect()
            };
            state.local_aggregate(topo, &theta);
            for (c, on) in theta.iter().enumerate() {
                if *on {
                    local_counts[c] += 1;
                    let cost = self.costs.map(|m| m.local_aggregation(c, event_index)).unwrap_or_default();
                    event_index += 1;
                    cum_energy += cost.energy;
                    cum_delay += cost.delay;
                    events.push(CostEvent {
                        t,
                        kind: EventKind::Local,
                        subnet: Some(c),
                        energy: cost.energy,
                        delay: cost.delay,
                    });
                }
            }
            if let Some(comp) = companion.as_mut() {
                comp.step(topo, model, plan.eta)?;
            }

            if t + plan.delay == t_next {
                let snap = state.capture_global_snapshot(topo);
                if let Some(comp) = companion.as_ref() {
                    companion_snapshot = Some(comp.global(topo));
                }
                let cost = self.costs.map(|m| m.global_aggregation()).unwrap_or_default();
                cum_energy += cost.energy;
                cum_delay += cost.delay;
                events.push(CostEvent {
                    t,
                    kind: EventKind::Global,
                    subnet: None,
                    energy: cost.energy,
                    delay: cost.delay,
                });
                if t_next < total_steps {
                    let uploads = state.tentative.clone();
                    let ctx = DecisionContext {
                        k,
                        t,
                        next_sync: t_next,
                        total_steps,
                        uploads: &uploads,
                        snapshot: &snap,
                        current: &plan,
                    };
                    let p = source.next_interval(&ctx)?;
                    p.validate(self.options.allow_full_combiner)?;
                    next_plan = Some(p);
                }
            }

            if t == t_next && t != total_steps {
                state.global_synchronize(plan.alpha)?;
                if let (Some(comp), Some(snap)) = (companion.as_mut(), companion_snapshot.take()) {
                    comp.sync(plan.alpha, &snap);
                }
                intervals.push(record(k, t_start, &plan, &local_counts));
                local_counts = vec![0; n_sub];
                k += 1;
                t_start = t;
                plan = next_plan
                    .take()
                    .ok_or_else(|| DflError::InvalidSchedule(format!("no plan decided for interval {k}")))?;
            }

            let emit = t == total_steps || (self.options.metrics_every > 0 && t % self.options.metrics_every == 0);
            if emit {
                let avg = topo.global_average(&state.local);
                let (e1, e2, e3) = match (companion.as_ref(), self.optimum.as_ref()) {
                    (Some(comp), Some(opt)) => {
                        let e = crate::analysis::error_terms(topo, &state.local, comp, opt);
                        (Some(e.e1_sq.sqrt()), Some(e.e2), Some(e.e3))
                    }
                    _ => (None, None, None),
                };
                metrics.push(MetricsRow {
                    t,
                    k,
                    loss: global.loss(&avg)?,
                    gap: self.optimum.as_ref().map(|o| vector::dist_sq(&avg, o)),
                    e1,
                    e2,
                    e3,
                    cum_energy,
                    cum_delay,
                });
            }
        }
        intervals.push(record(k, t_start, &plan, &local_counts));

        let final_model = topo.global_average(&state.local);
        let final_loss = global.loss(&final_model)?;
        let final_gap = self.optimum.as_ref().map(|o| vector::dist_sq(&final_model, o));
        Ok(RunOutput { metrics, events, intervals, final_model, final_loss, final_gap, local_models: state.local })
    }
}

fn record(k: usize, t_start: usize, plan: &IntervalPlan, counts: &[usize]) -> IntervalRecord {
    IntervalRecord {
        k,
        t_start,
        tau: plan.tau,
        delay: plan.delay,
        up_delay: plan.up_delay,
        alpha: plan.alpha,
        eta: plan.eta,
        local_aggregations: counts.to_vec(),
    }
}

/// Runs a fixed schedule.
pub fn run_training(trainer: &Trainer<'_>, schedule: &Schedule) -> Result<RunOutput> {
    schedule.validate(trainer.options.allow_full_combiner)?;
    trainer.run(&mut FixedSchedule::new(schedule.clone()), schedule.total_steps)
}

/// Reference protocols expressed through the same engine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Baseline {
    /// All devices in one tier, no local aggregation, `alpha = 0`.
    FedAvg,
    /// Subnets kept, `alpha = 0`.
    HierarchicalFedAvg,
    Dfl {
        alpha: f64,
    },
}

/// Rewrites `schedule` for a baseline and runs it. FedAvg flattens the fleet
/// into a single subnet.
pub fn run_baseline(trainer: &Trainer<'_>, baseline: Baseline, schedule: &Schedule) -> Result<RunOutput> {
    let mut s = schedule.clone();
    match baseline {
        Baseline::FedAvg => {
            for p in &mut s.intervals {
                p.alpha = 0.0;
                p.local = LocalAggregation::Never;
            }
            let flat = trainer.topology.flattened()?;
            let t = Trainer {
                topology: &flat,
                model: trainer.model,
                options: trainer.options.clone(),
                initial_model: trainer.initial_model.clone(),
                optimum: trainer.optimum.clone(),
                costs: None,
            };
            run_training(&t, &s)
        }
        Baseline::HierarchicalFedAvg | Baseline::Dfl { .. } => {
            let alpha = if let Baseline::Dfl { alpha } = baseline { alpha } else { 0.0 };
            for p in &mut s.intervals {
                p.alpha = alpha;
            }
            run_training(trainer, &s)
        }
    }
}
