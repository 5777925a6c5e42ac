//! Per-step metrics, cost events and run manifests, with CSV/JSON I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::DecisionRecord;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: usize,
    pub k: usize,
    /// Global loss of the average of the local models.
    #[serde(rename = "F")]
    pub loss: f64,
    /// `|w_bar - w*|^2`, when the optimum is known.
    pub gap: Option<f64>,
    pub e1: Option<f64>,
    pub e2: Option<f64>,
    pub e3: Option<f64>,
    #[serde(rename = "cumEnergy")]
    pub cum_energy: f64,
    #[serde(rename = "cumDelay")]
    pub cum_delay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Local,
    Global,
}

/// One transmission event and what it cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEvent {
    pub t: usize,
    pub kind: EventKind,
    /// Subnet of a local aggregation; empty for global events.
    pub subnet: Option<usize>,
    pub energy: f64,
    pub delay: f64,
}

/// Summary of one global interval as it was executed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub k: usize,
    pub t_start: usize,
    pub tau: usize,
    pub delay: usize,
    pub up_delay: usize,
    pub alpha: f64,
    pub eta: f64,
    /// Number of local aggregations per subnet.
    pub local_aggregations: Vec<usize>,
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// One long-format record of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub metric: String,
    pub result: f64,
}

/// Mean of one metric at one sweep value, across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub axis: String,
    pub value: f64,
    pub metric: String,
    pub seeds: usize,
    pub mean: f64,
    /// Standard error of the mean; zero for a single seed.
    pub stderr: f64,
}

/// Groups sweep records by (axis, value, metric), keeping first-seen order.
pub fn summarize(records: &[SweepRecord]) -> Vec<SummaryRow> {
    let mut groups: Vec<(&str, f64, &str, Vec<f64>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|g| g.0 == r.axis && g.1 == r.value && g.2 == r.metric) {
            Some(g) => g.3.push(r.result),
            None => groups.push((&r.axis, r.value, &r.metric, vec![r.result])),
        }
    }
    groups
        .into_iter()
        .map(|(axis, value, metric, xs)| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let stderr = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
            } else {
                0.0
            };
            SummaryRow { axis: axis.into(), value, metric: metric.into(), seeds: xs.len(), mean, stderr }
        })
        .collect()
}

/// Reproducibility record written next to every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    /// The effective configuration, defaults filled in.
    pub config: serde_json::Value,
    pub seed: u64,
    pub total_steps: usize,
    pub optimum_loss: Option<f64>,
    pub final_loss: f64,
    pub final_gap: Option<f64>,
    pub intervals: Vec<IntervalRecord>,
    #[serde(default)]
    pub decisions: Vec<DecisionRecord>,
}

/// SHA-256 of the canonical JSON encoding of a value.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_metrics_round_trip_with_missing_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![
            MetricsRow {
                t: 1,
                k: 0,
                loss: 0.1 + 0.2,
                gap: None,
                e1: Some(1e-300),
                e2: None,
                e3: Some(3.0),
                cum_energy: 0.0,
                cum_delay: 1.0 / 3.0,
            },
            MetricsRow {
                t: 2,
                k: 1,
                loss: -0.0,
                gap: Some(2.5),
                e1: None,
                e2: Some(f64::MAX),
                e3: None,
                cum_energy: 7.0,
                cum_delay: 0.5,
            },
        ];
        write_rows(&p, &rows).unwrap();
        let back: Vec<MetricsRow> = read_rows(&p).unwrap();
        assert_eq!(back, rows);
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("t,k,F,gap,e1,e2,e3,cumEnergy,cumDelay"));
    }

    #[test]
    fn test_hash_changes_with_value() {
        let a = config_hash(&serde_json::json!({"x": 1.0})).unwrap();
        let b = config_hash(&serde_json::json!({"x": 1.0000001})).unwrap();
        assert_ne!(a, b);
    }
}
