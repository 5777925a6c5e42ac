//! The 2x2 matrix that couples the subnet-dispersion and optimality-gap
//! errors, and its closed-form eigendecomposition.

use serde::Serialize;

use crate::error::{DflError, Result};

pub type Mat2 = [[f64; 2]; 2];

pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
        }
    }
    out
}

/// `B = [[1 - mu/beta, 2 omega], [1, -mu/beta]] = U D U^-1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DispersionMatrix {
    pub ratio: f64,
    pub omega: f64,
    /// `sqrt(8 omega + 1)`
    pub s: f64,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    pub b: Mat2,
    pub u: Mat2,
    pub u_inv: Mat2,
}

impl DispersionMatrix {
    /// `ratio = mu / beta` must lie in `(0, 1]` and `omega` in `[0, 1]`. The
    /// corner `ratio = 1, omega = 0` is rejected because `lambda_plus`
    /// vanishes there.
    pub fn new(ratio: f64, omega: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(DflError::InvalidInput(format!("mu/beta must be in (0, 1], got {ratio}")));
        }
        if ratio == 1.0 && omega == 0.0 {
            return Err(DflError::InvalidInput("mu/beta = 1 with omega = 0 has a zero eigenvalue".into()));
        }
        if !(0.0..=1.0).contains(&omega) {
            return Err(DflError::InvalidInput(format!("omega must be in [0, 1], got {omega}")));
        }
        let s = (8.0 * omega + 1.0).sqrt();
        let lambda_plus = 0.5 - ratio + 0.5 * s;
        let lambda_minus = 0.5 - ratio - 0.5 * s;
        let b = [[1.0 - ratio, 2.0 * omega], [1.0, -ratio]];
        let u = [[0.5 * (1.0 + s), -0.5 * (s - 1.0)], [1.0, 1.0]];
        let u_inv = [[1.0 / s, 0.5 * (s - 1.0) / s], [-1.0 / s, 0.5 * (s + 1.0) / s]];
        Ok(DispersionMatrix { ratio, omega, s, lambda_plus, lambda_minus, b, u, u_inv })
    }

    pub fn diag(&self) -> Mat2 {
        [[self.lambda_plus, 0.0], [0.0, self.lambda_minus]]
    }

    /// `U D U^-1`, which should reproduce `B`.
    pub fn reconstruct(&self) -> Mat2 {
        mat_mul(&mat_mul(&self.u, &self.diag()), &self.u_inv)
    }

    /// Coefficients `g1..g6` of the optimality-gap row of `U Pi U^-1` and
    /// `U Pi D^-1 U^-1`.
    pub fn g(&self) -> [f64; 6] {
        let s = self.s;
        let g1 = 0.5 * (1.0 - 1.0 / s);
        [g1, 1.0 - g1, 1.0 / s, -1.0 / s, 1.0 / (self.lambda_plus * s), 1.0 / (-self.lambda_minus * s)]
    }

    /// `(1 + eta beta lambda_plus)^n`
    pub fn pi_plus(&self, eta_beta: f64, n: usize) -> f64 {
        (1.0 + eta_beta * self.lambda_plus).powi(n as i32)
    }

    /// `(1 + eta beta lambda_minus)^n`
    pub fn pi_minus(&self, eta_beta: f64, n: usize) -> f64 {
        (1.0 + eta_beta * self.lambda_minus).powi(n as i32)
    }
}
