//! Dataset ingestion and synthetic generators.
//!
//! CSV files carry a header row followed by rows `y,x1,...,xm`.
//! IDX files follow the classic MNIST layout: a big-endian magic word
//! `0x0000_08NN` (unsigned bytes, `NN` dimensions), `NN` big-endian `u32`
//! sizes, then the raw bytes. Image pixels are scaled to `[0, 1]`.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DflError, Result};
use crate::losses::Dataset;
use crate::rng;

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let dim = reader
        .headers()?
        .len()
        .checked_sub(1)
        .filter(|d| *d > 0)
        .ok_or_else(|| DflError::Parse("csv header needs a label column and at least one feature".into()))?;
    let mut data = Dataset::new(dim);
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| DflError::Parse(format!("csv row {}: {e}", row + 1)))?;
        if vals.len() != dim + 1 {
            return Err(DflError::DimensionMismatch { expected: dim + 1, got: vals.len() });
        }
        data.push(&vals[1..], vals[0])?;
    }
    Ok(data)
}

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["y".to_string()];
    header.extend((1..=data.dim()).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (x, y) in data.iter() {
        let mut rec = vec![y.to_string()];
        rec.extend(x.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_idx_raw(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(DflError::Parse(format!("{}: not an unsigned-byte idx file", path.display())));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(DflError::Parse(format!("{}: truncated idx header", path.display())));
    }
    let dims: Vec<usize> =
        (0..ndims).map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize).collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count {
        return Err(DflError::Parse(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            count,
            bytes.len() - header
        )));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Reads an idx image/label pair. `limit` keeps only the first `limit`
/// samples; `append_bias` adds a constant-one feature.
pub fn read_idx(images: &Path, labels: &Path, limit: Option<usize>, append_bias: bool) -> Result<Dataset> {
    let (idims, ibytes) = read_idx_raw(images)?;
    let (ldims, lbytes) = read_idx_raw(labels)?;
    if idims.is_empty() || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(DflError::Parse("idx image and label counts disagree".into()));
    }
    let n = limit.map_or(idims[0], |l| l.min(idims[0]));
    let pixels: usize = idims[1..].iter().product();
    let dim = pixels + usize::from(append_bias);
    let mut data = Dataset::new(dim);
    let mut x = vec![0.0; dim];
    for i in 0..n {
        for (j, b) in ibytes[i * pixels..(i + 1) * pixels].iter().enumerate() {
            x[j] = *b as f64 / 255.0;
        }
        if append_bias {
            x[pixels] = 1.0;
        }
        data.push(&x, lbytes[i] as f64)?;
    }
    Ok(data)
}

/// Gaussian class clusters for multiclass experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianClasses {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub points_per_class: usize,
    /// Distance of every class mean from the origin.
    pub separation: f64,
    pub noise: f64,
}

impl GaussianClasses {
    /// Generated dataset has `feature_dim + 1` columns; the last one is a bias.
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.num_classes < 2 || self.feature_dim == 0 || self.points_per_class == 0 {
            return Err(DflError::InvalidInput("gaussian classes need >=2 classes, >=1 feature and >=1 point".into()));
        }
        let mut means = Vec::with_capacity(self.num_classes);
        let mut r = rng::stream(seed, rng::DATA, 0, 0);
        for _ in 0..self.num_classes {
            let v: Vec<f64> = (0..self.feature_dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let n = crate::vector::norm(&v).max(1e-12);
            means.push(v.into_iter().map(|a| a * self.separation / n).collect::<Vec<f64>>());
        }
        let mut data = Dataset::new(self.feature_dim + 1);
        let mut x = vec![1.0; self.feature_dim + 1];
        for p in 0..self.points_per_class {
            for (k, mean) in means.iter().enumerate() {
                let mut r = rng::stream(seed, rng::DATA, 1 + k as u64, p as u64);
                for j in 0..self.feature_dim {
                    let z: f64 = StandardNormal.sample(&mut r);
                    x[j] = mean[j] + self.noise * z;
                }
                data.push(&x, k as f64)?;
            }
        }
        Ok(data)
    }
}

/// Per-device linear-regression data with device-specific model shifts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionFleet {
    pub feature_dim: usize,
    pub points_per_device: usize,
    pub noise: f64,
    /// Standard deviation of the per-device perturbation of the true model.
    pub device_shift: f64,
    /// When set, all points of a device share one feature vector, which makes
    /// the minibatch gradient noise independent of the model.
    #[serde(default)]
    pub shared_design: bool,
}

impl RegressionFleet {
    pub fn generate(&self, num_devices: usize, seed: u64) -> Result<Vec<Dataset>> {
        if self.feature_dim == 0 || self.points_per_device == 0 || num_devices == 0 {
            return Err(DflError::InvalidInput("regression fleet needs positive sizes".into()));
        }
        let mut r = rng::stream(seed, rng::DATA, 0, 0);
        let truth: Vec<f64> = (0..self.feature_dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let mut out = Vec::with_capacity(num_devices);
        for dev in 0..num_devices {
            let mut r = rng::stream(seed, rng::DATA, 1, dev as u64);
            let w: Vec<f64> = truth
                .iter()
                .map(|t| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    t + self.device_shift * z
                })
                .collect();
            let shared: Vec<f64> = (0..self.feature_dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let mut data = Dataset::new(self.feature_dim);
            for _ in 0..self.points_per_device {
                let x: Vec<f64> = if self.shared_design {
                    shared.clone()
                } else {
                    (0..self.feature_dim).map(|_| StandardNormal.sample(&mut r)).collect()
                };
                let eps: f64 = StandardNormal.sample(&mut r);
                let y = crate::vector::dot(&w, &x) + self.noise * eps;
                data.push(&x, y)?;
            }
            out.push(data);
        }
        Ok(out)
    }
}

/// Uniform draw in `[lo, hi)`.
pub(crate) fn uniform<R: Rng + ?Sized>(r: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * r.random::<f64>()
}
