//! JSON experiment configuration and the code that turns it into runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::{ControlConfig, Controller, DecisionRecord};
use crate::data::{self, GaussianClasses, RegressionFleet};
use crate::engine::EngineOptions;
use crate::engine::{run_baseline, Baseline, LocalAggregation, RunOutput, Schedule, StepSizeRule, Trainer};
use crate::error::{DflError, Result};
use crate::fleet::{partition_iid, partition_label_skew, FleetTopology, LabelPattern};
use crate::losses::{Dataset, LossModel};
use crate::metrics::{config_hash, RunManifest};
use crate::netcost::{CostModel, RadioConfig};
use crate::vector::ModelVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    GaussianClasses(GaussianClasses),
    RegressionFleet(RegressionFleet),
    Csv {
        path: PathBuf,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default = "yes")]
        append_bias: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Ridge,
    SquaredHinge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub loss: LossName,
    pub regularization: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Iid,
    LabelSkew { labels_per_device: usize, pattern: LabelPattern },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSpec {
    pub num_devices: usize,
    pub subnet_sizes: Vec<usize>,
    #[serde(default = "iid")]
    pub partition: PartitionSpec,
}

fn iid() -> PartitionSpec {
    PartitionSpec::Iid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModeSpec {
    Fixed {
        tau: usize,
        /// Steps between capture and sync; derived from the radio model when absent.
        #[serde(default)]
        delay: Option<usize>,
        alpha: f64,
        eta_max: f64,
        #[serde(default)]
        gamma: f64,
        local: LocalAggregation,
    },
    Adaptive {
        #[serde(default)]
        delay: Option<usize>,
        #[serde(default)]
        control: ControlConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub total_steps: usize,
    pub batch_size: usize,
    pub mode: ModeSpec,
    #[serde(default)]
    pub baseline: Option<Baseline>,
    #[serde(default)]
    pub allow_full_combiner: bool,
    #[serde(default = "one")]
    pub metrics_every: usize,
    #[serde(default)]
    pub track_errors: bool,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "one")]
    pub num_seeds: usize,
    /// Seed for data generation and partitioning; the run seed when absent.
    #[serde(default)]
    pub data_seed: Option<u64>,
    pub model: ModelSpec,
    pub data: DataSpec,
    pub fleet: FleetSpec,
    pub training: TrainingSpec,
    #[serde(default)]
    pub radio: RadioConfig,
}

fn field(field: &str, message: impl Into<String>) -> DflError {
    DflError::Config { field: field.into(), message: message.into() }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            // Missing and unknown fields are reported one level up; name them.
            let named = inner
                .split('`')
                .nth(1)
                .filter(|_| inner.starts_with("missing field") || inner.starts_with("unknown field"))
                .map(|f| if path == "." { f.to_string() } else { format!("{path}.{f}") });
            field(&named.unwrap_or(path), inner)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_seeds == 0 {
            return Err(field("num_seeds", "must be at least 1"));
        }
        if !(self.model.regularization.is_finite() && self.model.regularization >= 0.0) {
            return Err(field("model.regularization", "must be finite and >= 0"));
        }
        let f = &self.fleet;
        if f.num_devices == 0 {
            return Err(field("fleet.num_devices", "must be positive"));
        }
        if f.subnet_sizes.iter().sum::<usize>() != f.num_devices || f.subnet_sizes.contains(&0) {
            return Err(field("fleet.subnet_sizes", "must be positive and sum to fleet.num_devices"));
        }
        let t = &self.training;
        if t.total_steps == 0 {
            return Err(field("training.total_steps", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(field("training.batch_size", "must be positive"));
        }
        match &t.mode {
            ModeSpec::Fixed { tau, delay, alpha, eta_max, gamma, .. } => {
                if *tau == 0 {
                    return Err(field("training.mode.tau", "must be positive"));
                }
                let d = delay.unwrap_or_else(|| self.radio.round_trip_iterations());
                if d >= *tau {
                    return Err(field("training.mode.delay", format!("delay {d} must be at most tau - 1")));
                }
                let max_alpha_ok = if t.allow_full_combiner { *alpha <= 1.0 } else { *alpha < 1.0 };
                if !(*alpha >= 0.0 && max_alpha_ok) {
                    return Err(field("training.mode.alpha", "must be in [0, 1) unless allow_full_combiner is set"));
                }
                if !(*eta_max > 0.0 && eta_max.is_finite()) {
                    return Err(field("training.mode.eta_max", "must be positive"));
                }
                if !(*gamma >= 0.0 && gamma.is_finite()) {
                    return Err(field("training.mode.gamma", "must be >= 0"));
                }
            }
            ModeSpec::Adaptive { control, .. } => {
                control.validate().map_err(|e| field("training.mode.control", e.to_string()))?;
            }
        }
        self.radio.validate().map_err(|e| field("radio", e.to_string()))?;
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn manifest(&self, run: &SeedRun) -> Result<RunManifest> {
        Ok(RunManifest {
            config_hash: self.hash()?,
            config: serde_json::to_value(self)?,
            seed: run.seed,
            total_steps: self.training.total_steps,
            optimum_loss: Some(run.optimum_loss),
            final_loss: run.output.final_loss,
            final_gap: run.output.final_gap,
            intervals: run.output.intervals.clone(),
            decisions: run.decisions.clone(),
        })
    }

    /// Delay in steps used by the run.
    pub fn delay(&self) -> usize {
        match &self.training.mode {
            ModeSpec::Fixed { delay, .. } | ModeSpec::Adaptive { delay, .. } => {
                delay.unwrap_or_else(|| self.radio.round_trip_iterations())
            }
        }
    }
}

/// Data, fleet and models built from a config for one seed.
pub struct Prepared {
    pub topology: FleetTopology,
    pub model: LossModel,
    pub optimum: ModelVector,
    pub optimum_loss: f64,
    pub costs: CostModel,
}

fn load_global(spec: &DataSpec, seed: u64, base: &Path) -> Result<Dataset> {
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
    match spec {
        DataSpec::GaussianClasses(g) => g.generate(seed),
        DataSpec::Csv { path } => data::read_csv(&resolve(path)),
        DataSpec::Idx { images, labels, limit, append_bias } => {
            data::read_idx(&resolve(images), &resolve(labels), *limit, *append_bias)
        }
        DataSpec::RegressionFleet(_) => unreachable!("handled by the caller"),
    }
}

/// Builds the fleet for `seed`. Relative data paths resolve against `base`.
pub fn prepare(cfg: &ExperimentConfig, seed: u64, base: &Path) -> Result<Prepared> {
    let data_seed = cfg.data_seed.unwrap_or(seed);
    let f = &cfg.fleet;
    let datasets = match &cfg.data {
        DataSpec::RegressionFleet(r) => r.generate(f.num_devices, data_seed)?,
        other => {
            let global = load_global(other, data_seed, base)?;
            match &f.partition {
                PartitionSpec::Iid => partition_iid(&global, f.num_devices, data_seed)?,
                PartitionSpec::LabelSkew { labels_per_device, pattern } => {
                    partition_label_skew(&global, f.num_devices, *labels_per_device, *pattern, data_seed)?
                }
            }
        }
    };
    let feature_dim = datasets[0].dim();
    let model = match cfg.model.loss {
        LossName::Ridge => LossModel::ridge(feature_dim, cfg.model.regularization),
        LossName::SquaredHinge => {
            let classes = datasets.iter().flat_map(|d| d.labels().iter()).fold(0.0f64, |m, y| m.max(*y)) as usize + 1;
            LossModel::svm(feature_dim, classes.max(2), cfg.model.regularization)
        }
    };
    let topology = FleetTopology::build(datasets, &f.subnet_sizes)?;
    let global = topology.global_objective(&model)?;
    let optimum = global.solve_optimum()?;
    let optimum_loss = global.loss(&optimum)?;
    let subnets = (0..topology.num_subnets()).map(|c| topology.members(c).to_vec()).collect();
    let costs = CostModel::new(cfg.radio.clone(), subnets, model.model_dim(), seed)?;
    Ok(Prepared { topology, model, optimum, optimum_loss, costs })
}

/// Outcome of one seed.
pub struct SeedRun {
    pub seed: u64,
    pub output: RunOutput,
    pub decisions: Vec<DecisionRecord>,
    pub optimum_loss: f64,
    pub final_accuracy: f64,
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64, base: &Path) -> Result<SeedRun> {
    let prep = prepare(cfg, seed, base)?;
    let t = &cfg.training;
    let options = EngineOptions {
        seed,
        batch_size: t.batch_size,
        allow_full_combiner: t.allow_full_combiner,
        metrics_every: t.metrics_every,
        track_errors: t.track_errors,
    };
    let mut trainer = Trainer::new(&prep.topology, prep.model, options);
    trainer.optimum = Some(prep.optimum.clone());
    trainer.costs = Some(&prep.costs);
    let delay = cfg.delay();
    let (output, decisions) = match &t.mode {
        ModeSpec::Fixed { tau, alpha, eta_max, gamma, local, .. } => {
            let schedule = Schedule::periodic(
                t.total_steps,
                *tau,
                delay,
                *alpha,
                StepSizeRule { eta_max: *eta_max, gamma: *gamma },
                local.clone(),
            );
            let baseline = t.baseline.unwrap_or(Baseline::Dfl { alpha: *alpha });
            (run_baseline(&trainer, baseline, &schedule)?, Vec::new())
        }
        ModeSpec::Adaptive { control, .. } => {
            let mut ctl =
                Controller::new(&prep.topology, prep.model, control.clone(), delay, t.total_steps, t.batch_size, seed);
            ctl.costs = Some(&prep.costs);
            let out = trainer.run(&mut ctl, t.total_steps)?;
            (out, ctl.decisions)
        }
    };
    let all = Dataset::concat(prep.topology.feature_dim(), prep.topology.datasets())?;
    let final_accuracy = prep.model.accuracy(&all, &output.final_model);
    Ok(SeedRun { seed, output, decisions, optimum_loss: prep.optimum_loss, final_accuracy })
}

/// Replaces the value at a dotted path of a JSON document. Whole numbers are
/// stored as integers so they can populate integer fields.
pub fn set_path(doc: &mut serde_json::Value, path: &str, value: f64) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| field(path, "path does not lead through objects"))?;
        if i + 1 == parts.len() {
            let v = if value.fract() == 0.0 && value.abs() < 9.0e15 {
                serde_json::Value::from(value as i64)
            } else {
                serde_json::Value::from(value)
            };
            obj.insert(p.to_string(), v);
            return Ok(());
        }
        cur = obj.get_mut(*p).ok_or_else(|| field(path, format!("no field `{p}`")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 1,
        "model": {"loss": "ridge", "regularization": 0.1},
        "data": {"kind": "regression_fleet", "feature_dim": 2, "points_per_device": 8, "noise": 0.1, "device_shift": 0.3},
        "fleet": {"num_devices": 4, "subnet_sizes": [2, 2]},
        "training": {"total_steps": 12, "batch_size": 4,
            "mode": {"kind": "fixed", "tau": 4, "delay": 1, "alpha": 0.3, "eta_max": 0.05, "local": {"kind": "every", "period": 2}}}
    }"#;

    #[test]
    fn test_minimal_config_runs() {
        let cfg = ExperimentConfig::from_json_str(MINIMAL).unwrap();
        let r = run_seed(&cfg, 1, Path::new(".")).unwrap();
        assert_eq!(r.output.metrics.len(), 12);
    }

    #[test]
    fn test_missing_field_is_named() {
        let text = MINIMAL.replace("\"total_steps\": 12, ", "");
        match ExperimentConfig::from_json_str(&text) {
            Err(DflError::Config { field, .. }) => assert_eq!(field, "training.total_steps"),
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn test_wrong_type_is_named() {
        let text = MINIMAL.replace("\"batch_size\": 4", "\"batch_size\": \"four\"");
        match ExperimentConfig::from_json_str(&text) {
            Err(DflError::Config { field, .. }) => assert_eq!(field, "training.batch_size"),
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn test_semantic_error_is_named() {
        let text = MINIMAL.replace("\"delay\": 1", "\"delay\": 4");
        match ExperimentConfig::from_json_str(&text) {
            Err(DflError::Config { field, .. }) => assert_eq!(field, "training.mode.delay"),
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn test_set_path_integer() {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        set_path(&mut v, "training.mode.delay", 2.0).unwrap();
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.delay(), 2);
    }
}
