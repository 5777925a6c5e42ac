//! Devices, subnets, data partitioning and heterogeneity measurement.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{DflError, Result};
use crate::losses::{second_moment, Dataset, LossKind, LossModel, WeightedObjective};
use crate::rng;
use crate::vector::{self, ModelVector};

/// Devices grouped into subnets, with the data-size weights used by every
/// aggregation: `rho_i = D_i / D_subnet` and `varrho_c = D_subnet / D_total`.
#[derive(Clone, Debug)]
pub struct FleetTopology {
    datasets: Vec<Dataset>,
    subnets: Vec<Vec<usize>>,
    subnet_of: Vec<usize>,
    device_weights: Vec<f64>,
    subnet_weights: Vec<f64>,
}

impl FleetTopology {
    /// Groups consecutive devices into subnets of the given sizes.
    pub fn build(datasets: Vec<Dataset>, subnet_sizes: &[usize]) -> Result<Self> {
        if subnet_sizes.iter().sum::<usize>() != datasets.len() {
            return Err(DflError::InvalidTopology(format!(
                "subnet sizes sum to {} but there are {} devices",
                subnet_sizes.iter().sum::<usize>(),
                datasets.len()
            )));
        }
        if subnet_sizes.contains(&0) {
            return Err(DflError::InvalidTopology("empty subnet".into()));
        }
        if let Some(i) = datasets.iter().position(|d| d.is_empty()) {
            return Err(DflError::InsufficientData(format!("device {i} has no data")));
        }
        let dim = datasets[0].dim();
        if let Some(d) = datasets.iter().find(|d| d.dim() != dim) {
            return Err(DflError::DimensionMismatch { expected: dim, got: d.dim() });
        }
        let total: f64 = datasets.iter().map(|d| d.len() as f64).sum();
        let mut subnets = Vec::with_capacity(subnet_sizes.len());
        let mut subnet_of = vec![0; datasets.len()];
        let mut device_weights = vec![0.0; datasets.len()];
        let mut subnet_weights = Vec::with_capacity(subnet_sizes.len());
        let mut next = 0;
        for (c, &size) in subnet_sizes.iter().enumerate() {
            let members: Vec<usize> = (next..next + size).collect();
            next += size;
            let sub_total: f64 = members.iter().map(|&i| datasets[i].len() as f64).sum();
            for &i in &members {
                subnet_of[i] = c;
                device_weights[i] = datasets[i].len() as f64 / sub_total;
            }
            subnet_weights.push(sub_total / total);
            subnets.push(members);
        }
        Ok(FleetTopology { datasets, subnets, subnet_of, device_weights, subnet_weights })
    }

    pub fn num_devices(&self) -> usize {
        self.datasets.len()
    }

    pub fn num_subnets(&self) -> usize {
        self.subnets.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.datasets[0].dim()
    }

    pub fn members(&self, c: usize) -> &[usize] {
        &self.subnets[c]
    }

    pub fn subnet_sizes(&self) -> Vec<usize> {
        self.subnets.iter().map(|s| s.len()).collect()
    }

    pub fn subnet_of(&self, i: usize) -> usize {
        self.subnet_of[i]
    }

    pub fn dataset(&self, i: usize) -> &Dataset {
        &self.datasets[i]
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    pub fn device_weight(&self, i: usize) -> f64 {
        self.device_weights[i]
    }

    pub fn subnet_weight(&self, c: usize) -> f64 {
        self.subnet_weights[c]
    }

    /// Same devices in a single subnet.
    pub fn flattened(&self) -> Result<FleetTopology> {
        FleetTopology::build(self.datasets.clone(), &[self.num_devices()])
    }

    /// Global objective `F = sum_c varrho_c sum_i rho_i F_i`.
    pub fn global_objective(&self, model: &LossModel) -> Result<WeightedObjective<'_>> {
        let parts = (0..self.num_devices())
            .map(|i| (&self.datasets[i], self.subnet_weights[self.subnet_of[i]] * self.device_weights[i]))
            .collect();
        WeightedObjective::new(*model, parts)
    }

    /// Subnet objective `F_c = sum_{i in S_c} rho_i F_i`.
    pub fn subnet_objective(&self, model: &LossModel, c: usize) -> Result<WeightedObjective<'_>> {
        let parts = self.subnets[c].iter().map(|&i| (&self.datasets[i], self.device_weights[i])).collect();
        WeightedObjective::new(*model, parts)
    }

    /// `sum_{i in S_c} rho_i models[i]`
    pub fn subnet_average(&self, c: usize, models: &[ModelVector]) -> ModelVector {
        let dim = models[0].len();
        vector::weighted_sum(dim, self.subnets[c].iter().map(|&i| (self.device_weights[i], models[i].as_slice())))
    }

    /// `sum_c varrho_c v[c]`
    pub fn global_average_of_subnets(&self, per_subnet: &[ModelVector]) -> ModelVector {
        let dim = per_subnet[0].len();
        vector::weighted_sum(dim, per_subnet.iter().enumerate().map(|(c, v)| (self.subnet_weights[c], v.as_slice())))
    }

    /// `sum_c varrho_c sum_i rho_i models[i]`
    pub fn global_average(&self, models: &[ModelVector]) -> ModelVector {
        let subs: Vec<ModelVector> = (0..self.num_subnets()).map(|c| self.subnet_average(c, models)).collect();
        self.global_average_of_subnets(&subs)
    }

    pub fn manifest(&self) -> PartitionManifest {
        PartitionManifest {
            devices: (0..self.num_devices())
                .map(|i| DeviceEntry {
                    device: i,
                    subnet: self.subnet_of[i],
                    num_points: self.datasets[i].len(),
                    labels: self.datasets[i].distinct_labels(),
                    weight: self.device_weights[i],
                })
                .collect(),
            subnet_weights: self.subnet_weights.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceEntry {
    pub device: usize,
    pub subnet: usize,
    pub num_points: usize,
    pub labels: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub devices: Vec<DeviceEntry>,
    pub subnet_weights: Vec<f64>,
}

/// How label sets are laid out over devices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelPattern {
    /// Device `d` holds the window of labels starting at `d * labels_per_device`.
    Spread,
    /// Every block of `group_size` consecutive devices shares one label window.
    Grouped { group_size: usize },
}

/// Splits a labeled dataset so each device sees exactly `labels_per_device`
/// labels. Points of each label are shuffled and dealt evenly to its holders.
pub fn partition_label_skew(
    global: &Dataset,
    num_devices: usize,
    labels_per_device: usize,
    pattern: LabelPattern,
    seed: u64,
) -> Result<Vec<Dataset>> {
    let labels = global.distinct_labels();
    let l = labels.len();
    if num_devices == 0 || labels_per_device == 0 || labels_per_device > l {
        return Err(DflError::InvalidInput(format!("labels_per_device must be in 1..={l} and num_devices positive")));
    }
    let mut perm: Vec<usize> = (0..l).collect();
    perm.shuffle(&mut rng::stream(seed, rng::PARTITION, 0, 0));
    let window_of = |d: usize| match pattern {
        LabelPattern::Spread => d,
        LabelPattern::Grouped { group_size } => d / group_size.max(1),
    };
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); l];
    for d in 0..num_devices {
        let start = window_of(d) * labels_per_device;
        for j in 0..labels_per_device {
            holders[perm[(start + j) % l]].push(d);
        }
    }
    let mut per_device: Vec<Vec<usize>> = vec![Vec::new(); num_devices];
    for (li, label) in labels.iter().enumerate() {
        let mut idx: Vec<usize> = (0..global.len()).filter(|&i| global.y(i) == *label).collect();
        let h = &holders[li];
        if h.is_empty() {
            return Err(DflError::InsufficientData(format!("label {label} is assigned to no device")));
        }
        if idx.len() < h.len() {
            return Err(DflError::InsufficientData(format!(
                "label {label} has {} points for {} holders",
                idx.len(),
                h.len()
            )));
        }
        idx.shuffle(&mut rng::stream(seed, rng::PARTITION, 1, li as u64));
        let n = idx.len();
        for (slot, &d) in h.iter().enumerate() {
            let lo = slot * n / h.len();
            let hi = (slot + 1) * n / h.len();
            per_device[d].extend_from_slice(&idx[lo..hi]);
        }
    }
    Ok(per_device.iter().map(|ix| global.subset(ix)).collect())
}

/// Shuffles and deals points evenly.
pub fn partition_iid(global: &Dataset, num_devices: usize, seed: u64) -> Result<Vec<Dataset>> {
    if num_devices == 0 || global.len() < num_devices {
        return Err(DflError::InsufficientData("fewer points than devices".into()));
    }
    let mut idx: Vec<usize> = (0..global.len()).collect();
    idx.shuffle(&mut rng::stream(seed, rng::PARTITION, 2, 0));
    let n = idx.len();
    Ok((0..num_devices).map(|d| global.subset(&idx[d * n / num_devices..(d + 1) * n / num_devices])).collect())
}

/// Gradient-diversity and smoothness constants of a fleet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneityParams {
    pub mu: f64,
    pub beta: f64,
    /// Inter-subnet diversity offset.
    pub delta: f64,
    /// Inter-subnet diversity slope; `omega = zeta / (2 beta)`.
    pub zeta: f64,
    #[serde(default)]
    pub delta_c: Vec<f64>,
    #[serde(default)]
    pub zeta_c: Vec<f64>,
    pub sigma: f64,
    pub phi: f64,
}

impl HeterogeneityParams {
    pub fn omega(&self) -> f64 {
        self.zeta / (2.0 * self.beta)
    }

    pub fn omega_c(&self, c: usize) -> f64 {
        self.zeta_c[c] / (2.0 * self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.mu, self.beta, self.delta, self.zeta, self.sigma, self.phi];
        if all.iter().chain(&self.delta_c).chain(&self.zeta_c).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DflError::InvalidInput("heterogeneity parameters must be finite and >= 0".into()));
        }
        if !(self.mu > 0.0 && self.beta > self.mu) {
            return Err(DflError::InvalidInput(format!("need 0 < mu < beta, got mu={} beta={}", self.mu, self.beta)));
        }
        if self.omega() > 1.0 || self.zeta_c.iter().any(|z| z / (2.0 * self.beta) > 1.0) {
            return Err(DflError::InvalidInput("omega = zeta/(2 beta) must be <= 1".into()));
        }
        if self.delta_c.len() != self.zeta_c.len() {
            return Err(DflError::InvalidInput("delta_c and zeta_c lengths differ".into()));
        }
        Ok(())
    }
}

/// How `|w - w*|` is evaluated at a probe.
#[derive(Clone, Debug)]
pub enum OptimumDistance<'a> {
    Exact(&'a [f64]),
    /// `|grad F(w)| / mu`, an upper bound that needs no optimum.
    GradientBound {
        mu: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityMeasurement {
    pub delta: f64,
    pub delta_c: Vec<f64>,
}

/// Smallest offsets `delta`, `delta_c` that make the diversity inequalities
/// hold at every probe for the given slopes.
pub fn measure_diversity(
    topology: &FleetTopology,
    model: &LossModel,
    probes: &[ModelVector],
    zeta: f64,
    zeta_c: f64,
    distance: OptimumDistance<'_>,
) -> Result<DiversityMeasurement> {
    if probes.is_empty() {
        return Err(DflError::DegenerateProbes("no probes".into()));
    }
    let global = topology.global_objective(model)?;
    let mut delta: f64 = 0.0;
    let mut delta_c = vec![0.0f64; topology.num_subnets()];
    for w in probes {
        let g = global.gradient(w)?;
        let r = match &distance {
            OptimumDistance::Exact(ws) => vector::dist(w, ws),
            OptimumDistance::GradientBound { mu } => vector::norm(&g) / mu,
        };
        for c in 0..topology.num_subnets() {
            let members = topology.members(c);
            let device_grads: Vec<ModelVector> =
                members.iter().map(|&i| model.gradient(topology.dataset(i), w)).collect::<Result<_>>()?;
            let gc = vector::weighted_sum(
                w.len(),
                members.iter().zip(&device_grads).map(|(&i, gi)| (topology.device_weight(i), gi.as_slice())),
            );
            delta = delta.max(vector::dist(&gc, &g) - zeta * r);
            for gi in &device_grads {
                delta_c[c] = delta_c[c].max(vector::dist(gi, &gc) - zeta_c * r);
            }
        }
    }
    Ok(DiversityMeasurement { delta, delta_c })
}

/// Secant estimates `(mu_hat, beta_hat)` of the global objective over probe
/// pairs. Pairs of identical points are skipped.
pub fn measure_smoothness_convexity(
    topology: &FleetTopology,
    model: &LossModel,
    pairs: &[(ModelVector, ModelVector)],
) -> Result<(f64, f64)> {
    let global = topology.global_objective(model)?;
    let mut mu = f64::INFINITY;
    let mut beta: f64 = 0.0;
    for (a, b) in pairs {
        let d = vector::dist(a, b);
        if d == 0.0 {
            continue;
        }
        let ratio = vector::dist(&global.gradient(a)?, &global.gradient(b)?) / d;
        mu = mu.min(ratio);
        beta = beta.max(ratio);
    }
    if !mu.is_finite() {
        return Err(DflError::DegenerateProbes("all probe pairs coincide".into()));
    }
    Ok((mu, beta))
}

/// Largest observed `|g_hat_i - grad F_i|` over devices, probe points and
/// repeated minibatch draws. `points[i]` is the probe for device `i`.
pub fn estimate_sgd_noise(
    topology: &FleetTopology,
    model: &LossModel,
    points: &[ModelVector],
    batch_size: usize,
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    if points.len() != topology.num_devices() {
        return Err(DflError::DimensionMismatch { expected: topology.num_devices(), got: points.len() });
    }
    let mut sigma: f64 = 0.0;
    for (i, w) in points.iter().enumerate() {
        let data = topology.dataset(i);
        let b = batch_size.min(data.len());
        let full = model.gradient(data, w)?;
        for r in 0..repeats {
            let mut stream = rng::stream(seed, rng::NOISE_ESTIMATE, i as u64, r as u64);
            let g = model.stochastic_gradient(data, w, b, &mut stream)?;
            sigma = sigma.max(vector::dist(&g, &full));
        }
    }
    Ok(sigma)
}

/// Exact constants of a ridge fleet.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeCertificate {
    /// Smallest curvature over the device, subnet and global objectives.
    pub mu: f64,
    /// Largest curvature over the device objectives.
    pub beta: f64,
    pub delta: f64,
    pub zeta: f64,
    pub delta_c: Vec<f64>,
    pub zeta_c: Vec<f64>,
    /// Exact minibatch noise level when every device uses one feature
    /// vector for all of its points; `None` otherwise.
    pub sigma: Option<f64>,
    pub optimum: ModelVector,
}

fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigenvalues().iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Certifies the smoothness, convexity, diversity and noise constants of a
/// ridge fleet from its second moments.
pub fn certify_ridge(topology: &FleetTopology, model: &LossModel, batch_size: usize) -> Result<RidgeCertificate> {
    if !matches!(model.loss, LossKind::Ridge) {
        return Err(DflError::InvalidInput("certification is only available for ridge".into()));
    }
    let m = model.feature_dim;
    let reg = DMatrix::<f64>::identity(m, m) * model.regularization;
    let device_a: Vec<DMatrix<f64>> = topology.datasets().iter().map(|d| second_moment(d) + &reg).collect();
    let weighted = |terms: &mut dyn Iterator<Item = (f64, usize)>| {
        let mut a = DMatrix::<f64>::zeros(m, m);
        for (w, i) in terms {
            a += &device_a[i] * w;
        }
        a
    };
    let subnet_a: Vec<DMatrix<f64>> = (0..topology.num_subnets())
        .map(|c| weighted(&mut topology.members(c).iter().map(|&i| (topology.device_weight(i), i))))
        .collect();
    let global_a = weighted(
        &mut (0..topology.num_devices())
            .map(|i| (topology.device_weight(i) * topology.subnet_weight(topology.subnet_of(i)), i)),
    );
    let lam_min = |a: &DMatrix<f64>| a.clone().symmetric_eigenvalues().min();
    let lam_max = |a: &DMatrix<f64>| a.clone().symmetric_eigenvalues().max();
    let mu =
        device_a.iter().chain(&subnet_a).chain(std::iter::once(&global_a)).map(lam_min).fold(f64::INFINITY, f64::min);
    let beta = device_a.iter().map(lam_max).fold(0.0, f64::max);
    let optimum = topology.global_objective(model)?.solve_optimum()?;

    let mut delta: f64 = 0.0;
    let mut zeta: f64 = 0.0;
    let mut delta_c = Vec::new();
    let mut zeta_c = Vec::new();
    for c in 0..topology.num_subnets() {
        let sub = topology.subnet_objective(model, c)?;
        let gc = sub.gradient(&optimum)?;
        delta = delta.max(vector::norm(&gc));
        zeta = zeta.max(spectral_norm(&(&subnet_a[c] - &global_a)));
        let mut dc: f64 = 0.0;
        let mut zc: f64 = 0.0;
        for &i in topology.members(c) {
            let gi = model.gradient(topology.dataset(i), &optimum)?;
            dc = dc.max(vector::dist(&gi, &gc));
            zc = zc.max(spectral_norm(&(&device_a[i] - &subnet_a[c])));
        }
        delta_c.push(dc);
        zeta_c.push(zc);
    }

    let mut sigma_sq: Option<f64> = Some(0.0);
    for d in topology.datasets() {
        let first = d.x(0);
        if (1..d.len()).any(|j| d.x(j) != first) {
            sigma_sq = None;
            break;
        }
        let n = d.len() as f64;
        let b = batch_size.min(d.len()) as f64;
        let mean = d.labels().iter().sum::<f64>() / n;
        let var = d.labels().iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let batch_var = if n > 1.0 { var / b * (n - b) / (n - 1.0) } else { 0.0 };
        let s = vector::dot(first, first) * batch_var;
        sigma_sq = sigma_sq.map(|cur| cur.max(s));
    }
    Ok(RidgeCertificate { mu, beta, delta, zeta, delta_c, zeta_c, sigma: sigma_sq.map(f64::sqrt), optimum })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(n_per: usize, labels: usize) -> Dataset {
        let mut d = Dataset::new(2);
        for l in 0..labels {
            for j in 0..n_per {
                d.push(&[l as f64, j as f64], l as f64).unwrap();
            }
        }
        d
    }

    #[test]
    fn test_weights_sum_to_one() {
        let data = vec![labeled(1, 2), labeled(2, 2), labeled(3, 1)];
        let t = FleetTopology::build(data, &[2, 1]).unwrap();
        assert!((t.device_weight(0) - 2.0 / 6.0).abs() < 1e-15);
        assert!((t.subnet_weight(0) - 6.0 / 9.0).abs() < 1e-15);
        let s: f64 = (0..2).map(|c| t.subnet_weight(c)).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn test_topology_rejects_size_mismatch() {
        let data = vec![labeled(1, 2), labeled(1, 2)];
        assert!(matches!(FleetTopology::build(data, &[3]), Err(DflError::InvalidTopology(_))));
    }

    #[test]
    fn test_label_skew_counts() {
        let g = labeled(30, 10);
        let parts = partition_label_skew(&g, 50, 3, LabelPattern::Spread, 4).unwrap();
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), g.len());
        for p in &parts {
            assert_eq!(p.distinct_labels().len(), 3);
        }
    }

    #[test]
    fn test_label_skew_all_labels_is_full_mix() {
        let g = labeled(20, 4);
        let parts = partition_label_skew(&g, 5, 4, LabelPattern::Spread, 1).unwrap();
        for p in &parts {
            assert_eq!(p.distinct_labels().len(), 4);
        }
    }

    #[test]
    fn test_label_skew_insufficient() {
        let g = labeled(1, 2);
        assert!(matches!(partition_label_skew(&g, 5, 1, LabelPattern::Spread, 0), Err(DflError::InsufficientData(_))));
    }

    #[test]
    fn test_smoothness_of_quadratic() {
        // Hessian diag(0.5, 2.0): x1 = [1, 0], x2 = [0, 2], mean of outer products.
        let mut d = Dataset::new(2);
        d.push(&[1.0, 0.0], 0.0).unwrap();
        d.push(&[0.0, 2.0], 0.0).unwrap();
        let t = FleetTopology::build(vec![d], &[1]).unwrap();
        let m = LossModel::ridge(2, 0.0);
        let pairs =
            vec![(vec![0.0, 0.0], vec![1.0, 0.0]), (vec![0.0, 0.0], vec![0.0, 1.0]), (vec![1.0, 1.0], vec![2.0, 3.0])];
        let (mu, beta) = measure_smoothness_convexity(&t, &m, &pairs).unwrap();
        assert!((mu - 0.5).abs() < 1e-12 && (beta - 2.0).abs() < 1e-12);
    }

    #[test]
    fn test_identical_devices_have_zero_diversity() {
        let mut d = Dataset::new(1);
        d.push(&[1.0], 2.0).unwrap();
        d.push(&[2.0], -1.0).unwrap();
        let t = FleetTopology::build(vec![d.clone(), d.clone(), d.clone(), d], &[2, 2]).unwrap();
        let m = LossModel::ridge(1, 0.1);
        let probes = vec![vec![0.0], vec![1.5], vec![-3.0]];
        let div = measure_diversity(&t, &m, &probes, 0.0, 0.0, OptimumDistance::GradientBound { mu: 1.0 }).unwrap();
        assert_eq!(div.delta, 0.0);
        assert!(div.delta_c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn test_degenerate_probes() {
        let t = FleetTopology::build(vec![labeled(2, 2)], &[1]).unwrap();
        let m = LossModel::ridge(2, 0.0);
        let pairs = vec![(vec![1.0, 1.0], vec![1.0, 1.0])];
        assert!(matches!(measure_smoothness_convexity(&t, &m, &pairs), Err(DflError::DegenerateProbes(_))));
    }
}
