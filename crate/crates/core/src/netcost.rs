//! Radio and backhaul cost model: Shannon rates, transmission energy and
//! delay, and conversion of wall-clock delay to SGD iterations.

use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::data::uniform;
use crate::error::{DflError, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub tx_power_w: f64,
    pub bandwidth_hz: f64,
    pub noise_dbm_per_hz: f64,
    pub ref_gain_db: f64,
    pub ref_distance_m: f64,
    pub pathloss_exponent: f64,
    /// Devices are placed uniformly in a square of this side, base station at its centre.
    pub area_side_m: f64,
    pub edge_tx_power_w: f64,
    pub edge_cloud_rate_bps: f64,
    pub edge_cloud_latency_s: f64,
    pub bits_per_param: f64,
    /// SGD iterations per second on the devices.
    pub processing_rate_hz: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            tx_power_w: 0.25,
            bandwidth_hz: 1e6,
            noise_dbm_per_hz: -173.0,
            ref_gain_db: -30.0,
            ref_distance_m: 1.0,
            pathloss_exponent: 3.75,
            area_side_m: 30.0,
            edge_tx_power_w: 6.3,
            edge_cloud_rate_bps: 1e8,
            edge_cloud_latency_s: 0.05,
            bits_per_param: 32.0,
            processing_rate_hz: 200.0,
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tx_power_w", self.tx_power_w),
            ("bandwidth_hz", self.bandwidth_hz),
            ("ref_distance_m", self.ref_distance_m),
            ("area_side_m", self.area_side_m),
            ("edge_tx_power_w", self.edge_tx_power_w),
            ("edge_cloud_rate_bps", self.edge_cloud_rate_bps),
            ("bits_per_param", self.bits_per_param),
            ("processing_rate_hz", self.processing_rate_hz),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(DflError::InvalidInput(format!("radio.{name} must be positive")));
            }
        }
        if !(self.edge_cloud_latency_s >= 0.0) {
            return Err(DflError::InvalidInput("radio.edge_cloud_latency_s must be >= 0".into()));
        }
        Ok(())
    }

    /// Round-trip edge-cloud delay in SGD iterations.
    pub fn round_trip_iterations(&self) -> usize {
        wall_clock_to_iterations(self.edge_cloud_latency_s, self.processing_rate_hz)
    }
}

pub fn dbm_per_hz_to_watts_per_hz(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// `W log2(1 + p |h|^2 / (N0 W))` in bits per second.
pub fn shannon_rate(power_w: f64, gain_sq: f64, noise_dbm_per_hz: f64, bandwidth_hz: f64) -> f64 {
    let noise = dbm_per_hz_to_watts_per_hz(noise_dbm_per_hz) * bandwidth_hz;
    bandwidth_hz * (1.0 + power_w * gain_sq / noise).log2()
}

/// Energy in joules to send `model_dim` parameters of `bits` bits each.
pub fn transmission_energy(model_dim: usize, bits: f64, power_w: f64, rate_bps: f64) -> f64 {
    model_dim as f64 * bits * power_w / rate_bps
}

pub fn transmission_delay(model_dim: usize, bits: f64, rate_bps: f64) -> f64 {
    model_dim as f64 * bits / rate_bps
}

/// `ceil(delay * rate)`, with products within 1e-9 of an integer snapped to it.
pub fn wall_clock_to_iterations(delay_s: f64, rate_hz: f64) -> usize {
    let x = delay_s * rate_hz;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r.max(0.0) as usize
    } else {
        x.ceil().max(0.0) as usize
    }
}

/// Large-scale gain `beta0 (d0 / d)^n` with `d` clamped to at least `d0`.
pub fn path_gain(radio: &RadioConfig, distance_m: f64) -> f64 {
    let d = distance_m.max(radio.ref_distance_m);
    10f64.powf(radio.ref_gain_db / 10.0) * (radio.ref_distance_m / d).powf(radio.pathloss_exponent)
}

/// Distance of each device from its base station.
pub fn place_devices(radio: &RadioConfig, num_devices: usize, seed: u64) -> Vec<f64> {
    let h = radio.area_side_m / 2.0;
    (0..num_devices)
        .map(|i| {
            let mut r = rng::stream(seed, rng::PLACEMENT, i as u64, 0);
            let dx = uniform(&mut r, -h, h);
            let dy = uniform(&mut r, -h, h);
            (dx * dx + dy * dy).sqrt()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventCost {
    pub energy: f64,
    pub delay: f64,
}

/// Per-event costs the controller plans with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSnapshot {
    pub global_energy: f64,
    pub global_delay: f64,
    pub local_energy: Vec<f64>,
    pub local_delay: Vec<f64>,
}

/// Cost model for one fleet: fixed placements, fading redrawn per event.
#[derive(Clone, Debug)]
pub struct CostModel {
    pub radio: RadioConfig,
    pub distances: Vec<f64>,
    pub subnets: Vec<Vec<usize>>,
    pub model_dim: usize,
    pub seed: u64,
}

impl CostModel {
    pub fn new(radio: RadioConfig, subnets: Vec<Vec<usize>>, model_dim: usize, seed: u64) -> Result<Self> {
        radio.validate()?;
        let n = subnets.iter().map(|s| s.len()).sum();
        let distances = place_devices(&radio, n, seed);
        Ok(CostModel { radio, distances, subnets, model_dim, seed })
    }

    /// `|h|^2` of `device` for transmission event `event`; Rayleigh fading
    /// gives an exponential power factor.
    pub fn channel_gain_sq(&self, device: usize, event: u64) -> f64 {
        let mut r = rng::stream(self.seed, rng::FADING, event, device as u64);
        let fading: f64 = Exp1.sample(&mut r);
        path_gain(&self.radio, self.distances[device]) * fading.max(f64::MIN_POSITIVE)
    }

    pub fn device_rate(&self, device: usize, event: u64) -> f64 {
        shannon_rate(
            self.radio.tx_power_w,
            self.channel_gain_sq(device, event),
            self.radio.noise_dbm_per_hz,
            self.radio.bandwidth_hz,
        )
    }

    /// Uplink of every member of subnet `c` to its edge server.
    pub fn local_aggregation(&self, c: usize, event: u64) -> EventCost {
        let bits = self.radio.bits_per_param;
        let mut cost = EventCost::default();
        for &j in &self.subnets[c] {
            let rate = self.device_rate(j, event);
            cost.energy += transmission_energy(self.model_dim, bits, self.radio.tx_power_w, rate);
            cost.delay = cost.delay.max(transmission_delay(self.model_dim, bits, rate));
        }
        cost
    }

    /// Every edge server sends its aggregate to the cloud over the backhaul.
    pub fn global_aggregation(&self) -> EventCost {
        let bits = self.radio.bits_per_param;
        let rate = self.radio.edge_cloud_rate_bps;
        let per_edge = transmission_energy(self.model_dim, bits, self.radio.edge_tx_power_w, rate);
        EventCost {
            energy: per_edge * self.subnets.len() as f64,
            delay: self.radio.edge_cloud_latency_s + transmission_delay(self.model_dim, bits, rate),
        }
    }

    pub fn snapshot(&self, event: u64) -> CostSnapshot {
        let g = self.global_aggregation();
        let locals: Vec<EventCost> = (0..self.subnets.len()).map(|c| self.local_aggregation(c, event)).collect();
        CostSnapshot {
            global_energy: g.energy,
            global_delay: g.delay,
            local_energy: locals.iter().map(|e| e.energy).collect(),
            local_delay: locals.iter().map(|e| e.delay).collect(),
        }
    }
}
