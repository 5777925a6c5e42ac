//! Noise-free companion of the training process and the three error terms.
//!
//! The companion keeps one model per subnet, moved by full subnet gradients,
//! and applies the same delayed combiner as the devices at every sync.

use super::recursions::ErrorState;
use crate::error::Result;
use crate::fleet::FleetTopology;
use crate::losses::LossModel;
use crate::vector::{self, ModelVector};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseFreeCompanion {
    pub subnet_models: Vec<ModelVector>,
}

impl NoiseFreeCompanion {
    pub fn new(num_subnets: usize, start: &[f64]) -> Self {
        NoiseFreeCompanion { subnet_models: vec![start.to_vec(); num_subnets] }
    }

    /// `v_c <- v_c - eta grad F_c(v_c)` for every subnet.
    pub fn step(&mut self, topology: &FleetTopology, model: &LossModel, eta: f64) -> Result<()> {
        for c in 0..topology.num_subnets() {
            let g = topology.subnet_objective(model, c)?.gradient(&self.subnet_models[c])?;
            vector::axpy(&mut self.subnet_models[c], -eta, &g);
        }
        Ok(())
    }

    /// `sum_c varrho_c v_c`
    pub fn global(&self, topology: &FleetTopology) -> ModelVector {
        topology.global_average_of_subnets(&self.subnet_models)
    }

    /// `v_c <- (1 - alpha) snapshot + alpha v_c`
    pub fn sync(&mut self, alpha: f64, snapshot: &[f64]) {
        for v in &mut self.subnet_models {
            *v = vector::convex_combination(snapshot, v, alpha);
        }
    }
}

/// Measured error terms; the returned `e1_sq` is the squared local dispersion.
pub fn error_terms(
    topology: &FleetTopology,
    local_models: &[ModelVector],
    companion: &NoiseFreeCompanion,
    optimum: &[f64],
) -> ErrorState {
    let global = companion.global(topology);
    let mut e1_sq = 0.0;
    let mut e2 = 0.0;
    for c in 0..topology.num_subnets() {
        let vc = &companion.subnet_models[c];
        let inner: f64 = topology
            .members(c)
            .iter()
            .map(|&j| topology.device_weight(j) * vector::dist_sq(&local_models[j], vc))
            .sum();
        e1_sq += topology.subnet_weight(c) * inner;
        e2 += topology.subnet_weight(c) * vector::dist(vc, &global);
    }
    ErrorState { e1_sq, e2, e3: vector::dist(&global, optimum) }
}
