//! Per-sample losses, local objectives and their gradients.
//!
//! Two models are supported: ridge regression and a one-vs-all multiclass
//! squared-hinge SVM. The SVM parameter vector stores the class weight
//! vectors back to back, so its length is `feature_dim * num_classes`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DflError, Result};
use crate::vector::{self, ModelVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub y: f64,
}

/// Row-major collection of labeled points sharing one feature dimension.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Dataset { dim, features: Vec::new(), labels: Vec::new() }
    }

    pub fn from_points(dim: usize, points: &[LabeledPoint]) -> Result<Self> {
        let mut d = Dataset::new(dim);
        for p in points {
            d.push(&p.x, p.y)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, x: &[f64], y: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(DflError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(DflError::InvalidInput("non-finite value in data point".into()));
        }
        self.features.extend_from_slice(x);
        self.labels.push(y);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        (0..self.len()).map(move |i| (self.x(i), self.y(i)))
    }

    pub fn points(&self) -> Vec<LabeledPoint> {
        self.iter().map(|(x, y)| LabeledPoint { x: x.to_vec(), y }).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut d = Dataset::new(self.dim);
        for &i in indices {
            d.features.extend_from_slice(self.x(i));
            d.labels.push(self.y(i));
        }
        d
    }

    pub fn concat<'a, I: IntoIterator<Item = &'a Dataset>>(dim: usize, parts: I) -> Result<Dataset> {
        let mut d = Dataset::new(dim);
        for p in parts {
            if p.dim != dim {
                return Err(DflError::DimensionMismatch { expected: dim, got: p.dim });
            }
            d.features.extend_from_slice(&p.features);
            d.labels.extend_from_slice(&p.labels);
        }
        Ok(d)
    }

    /// Distinct labels in ascending order.
    pub fn distinct_labels(&self) -> Vec<f64> {
        let mut l = self.labels.clone();
        l.sort_by(f64::total_cmp);
        l.dedup();
        l
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    Ridge,
    SquaredHinge { num_classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossModel {
    pub loss: LossKind,
    pub regularization: f64,
    pub feature_dim: usize,
}

impl LossModel {
    pub fn ridge(feature_dim: usize, regularization: f64) -> Self {
        LossModel { loss: LossKind::Ridge, regularization, feature_dim }
    }

    pub fn svm(feature_dim: usize, num_classes: usize, regularization: f64) -> Self {
        LossModel { loss: LossKind::SquaredHinge { num_classes }, regularization, feature_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(DflError::InvalidInput("feature_dim must be positive".into()));
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return Err(DflError::InvalidInput("regularization must be finite and >= 0".into()));
        }
        if let LossKind::SquaredHinge { num_classes } = self.loss {
            if num_classes < 2 {
                return Err(DflError::InvalidInput("num_classes must be at least 2".into()));
            }
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        match self.loss {
            LossKind::Ridge => 1,
            LossKind::SquaredHinge { num_classes } => num_classes,
        }
    }

    /// Length of the parameter vector.
    pub fn model_dim(&self) -> usize {
        self.feature_dim * self.num_blocks()
    }

    fn check_model(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.model_dim() {
            return Err(DflError::DimensionMismatch { expected: self.model_dim(), got: w.len() });
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.feature_dim {
            return Err(DflError::DimensionMismatch { expected: self.feature_dim, got: data.dim() });
        }
        if data.is_empty() {
            return Err(DflError::InsufficientData("empty dataset".into()));
        }
        Ok(())
    }

    /// Unregularized loss of one sample.
    pub fn point_loss(&self, w: &[f64], x: &[f64], y: f64) -> f64 {
        match self.loss {
            LossKind::Ridge => {
                let r = y - vector::dot(w, x);
                0.5 * r * r
            }
            LossKind::SquaredHinge { num_classes } => {
                let m = self.feature_dim;
                let mut total = 0.0;
                for k in 0..num_classes {
                    let s = class_sign(y, k);
                    let slack = 1.0 - s * vector::dot(&w[k * m..(k + 1) * m], x);
                    if slack > 0.0 {
                        total += slack * slack;
                    }
                }
                total
            }
        }
    }

    /// Adds `scale * grad point_loss` to `out`.
    fn accumulate_point_gradient(&self, out: &mut [f64], w: &[f64], x: &[f64], y: f64, scale: f64) {
        match self.loss {
            LossKind::Ridge => {
                let r = vector::dot(w, x) - y;
                vector::axpy(out, scale * r, x);
            }
            LossKind::SquaredHinge { num_classes } => {
                let m = self.feature_dim;
                for k in 0..num_classes {
                    let s = class_sign(y, k);
                    let slack = 1.0 - s * vector::dot(&w[k * m..(k + 1) * m], x);
                    if slack > 0.0 {
                        vector::axpy(&mut out[k * m..(k + 1) * m], -2.0 * s * slack * scale, x);
                    }
                }
            }
        }
    }

    /// Local objective: mean sample loss plus `(reg/2)|w|^2`.
    pub fn loss(&self, data: &Dataset, w: &[f64]) -> Result<f64> {
        self.check_model(w)?;
        self.check_data(data)?;
        let mean = data.iter().map(|(x, y)| self.point_loss(w, x, y)).sum::<f64>() / data.len() as f64;
        Ok(mean + 0.5 * self.regularization * vector::dot(w, w))
    }

    /// Full-batch gradient of the local objective.
    pub fn gradient(&self, data: &Dataset, w: &[f64]) -> Result<ModelVector> {
        self.check_model(w)?;
        self.check_data(data)?;
        let mut g = vec![0.0; w.len()];
        let scale = 1.0 / data.len() as f64;
        for (x, y) in data.iter() {
            self.accumulate_point_gradient(&mut g, w, x, y, scale);
        }
        vector::axpy(&mut g, self.regularization, w);
        Ok(g)
    }

    /// Minibatch gradient with `batch_size` points drawn uniformly without
    /// replacement.
    pub fn stochastic_gradient<R: Rng + ?Sized>(
        &self,
        data: &Dataset,
        w: &[f64],
        batch_size: usize,
        rng: &mut R,
    ) -> Result<ModelVector> {
        self.check_model(w)?;
        self.check_data(data)?;
        if batch_size == 0 || batch_size > data.len() {
            return Err(DflError::InsufficientData(format!("batch size {batch_size} not in 1..={}", data.len())));
        }
        let mut g = vec![0.0; w.len()];
        let scale = 1.0 / batch_size as f64;
        if batch_size == data.len() {
            for (x, y) in data.iter() {
                self.accumulate_point_gradient(&mut g, w, x, y, scale);
            }
        } else {
            for i in rand::seq::index::sample(rng, data.len(), batch_size) {
                self.accumulate_point_gradient(&mut g, w, data.x(i), data.y(i), scale);
            }
        }
        vector::axpy(&mut g, self.regularization, w);
        Ok(g)
    }

    /// Ridge: the linear prediction. SVM: the index of the highest class score.
    pub fn predict(&self, w: &[f64], x: &[f64]) -> f64 {
        match self.loss {
            LossKind::Ridge => vector::dot(w, x),
            LossKind::SquaredHinge { num_classes } => {
                let m = self.feature_dim;
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for k in 0..num_classes {
                    let score = vector::dot(&w[k * m..(k + 1) * m], x);
                    if score > best_score {
                        best_score = score;
                        best = k;
                    }
                }
                best as f64
            }
        }
    }

    /// Fraction of correctly classified points (SVM only; ridge returns NaN).
    pub fn accuracy(&self, data: &Dataset, w: &[f64]) -> f64 {
        if matches!(self.loss, LossKind::Ridge) || data.is_empty() {
            return f64::NAN;
        }
        let hits = data.iter().filter(|(x, y)| self.predict(w, x) == *y).count();
        hits as f64 / data.len() as f64
    }

    /// Upper bound on the gradient Lipschitz constant of the local objective.
    pub fn smoothness_bound(&self, data: &Dataset) -> Result<f64> {
        self.check_data(data)?;
        let scale = match self.loss {
            LossKind::Ridge => 1.0,
            LossKind::SquaredHinge { .. } => 2.0,
        };
        let gram = second_moment(data);
        let top = gram.symmetric_eigenvalues().max();
        Ok(scale * top.max(0.0) + self.regularization)
    }
}

fn class_sign(y: f64, k: usize) -> f64 {
    if y == k as f64 {
        1.0
    } else {
        -1.0
    }
}

/// `X^T X / D` for a dataset.
pub fn second_moment(data: &Dataset) -> DMatrix<f64> {
    let m = data.dim();
    let mut a = DMatrix::<f64>::zeros(m, m);
    for (x, _) in data.iter() {
        for r in 0..m {
            for c in 0..m {
                a[(r, c)] += x[r] * x[c];
            }
        }
    }
    a / data.len().max(1) as f64
}

/// Weighted sum of local objectives, `F(w) = sum_j c_j F_j(w)`.
#[derive(Clone, Debug)]
pub struct WeightedObjective<'a> {
    pub model: LossModel,
    pub parts: Vec<(&'a Dataset, f64)>,
}

impl<'a> WeightedObjective<'a> {
    pub fn new(model: LossModel, parts: Vec<(&'a Dataset, f64)>) -> Result<Self> {
        model.validate()?;
        if parts.is_empty() {
            return Err(DflError::InsufficientData("no datasets in objective".into()));
        }
        for (d, c) in &parts {
            model.check_data(d)?;
            if !(c.is_finite() && *c >= 0.0) {
                return Err(DflError::InvalidInput("objective weights must be finite and >= 0".into()));
            }
        }
        Ok(WeightedObjective { model, parts })
    }

    pub fn loss(&self, w: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (d, c) in &self.parts {
            total += c * self.model.loss(d, w)?;
        }
        Ok(total)
    }

    pub fn gradient(&self, w: &[f64]) -> Result<ModelVector> {
        let mut g = vec![0.0; self.model.model_dim()];
        for (d, c) in &self.parts {
            let gi = self.model.gradient(d, w)?;
            vector::axpy(&mut g, *c, &gi);
        }
        Ok(g)
    }

    fn total_weight(&self) -> f64 {
        self.parts.iter().map(|(_, c)| c).sum()
    }

    /// Weighted `X^T X / D` and `X^T y / D` for the ridge normal equations.
    fn ridge_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let m = self.model.feature_dim;
        let mut a = DMatrix::<f64>::zeros(m, m);
        let mut b = DVector::<f64>::zeros(m);
        for (d, c) in &self.parts {
            a += second_moment(d) * *c;
            let s = c / d.len() as f64;
            for (x, y) in d.iter() {
                for r in 0..m {
                    b[r] += s * y * x[r];
                }
            }
        }
        (a, b)
    }

    /// Global minimizer. Ridge uses the normal equations; the SVM uses a
    /// line-searched descent method per class block until the gradient norm
    /// falls below `1e-10 * max(1, |grad F(0)|)`.
    pub fn solve_optimum(&self) -> Result<ModelVector> {
        let reg = self.model.regularization * self.total_weight();
        match self.model.loss {
            LossKind::Ridge => {
                let (mut a, b) = self.ridge_system();
                for i in 0..a.nrows() {
                    a[(i, i)] += reg;
                }
                let chol =
                    a.cholesky().ok_or_else(|| DflError::NotConverged("ridge normal equations are singular".into()))?;
                Ok(chol.solve(&b).iter().copied().collect())
            }
            LossKind::SquaredHinge { num_classes } => {
                if reg <= 0.0 {
                    return Err(DflError::InvalidInput("squared-hinge optimum needs positive regularization".into()));
                }
                let m = self.model.feature_dim;
                let mut w = vec![0.0; m * num_classes];
                for k in 0..num_classes {
                    let block = self.solve_hinge_block(k, reg)?;
                    w[k * m..(k + 1) * m].copy_from_slice(&block);
                }
                Ok(w)
            }
        }
    }

    fn hinge_block_eval(&self, k: usize, reg: f64, v: &[f64]) -> (f64, ModelVector, DMatrix<f64>) {
        let m = v.len();
        let mut loss = 0.5 * reg * vector::dot(v, v);
        let mut grad: ModelVector = v.iter().map(|x| reg * x).collect();
        let mut hess = DMatrix::<f64>::identity(m, m) * reg;
        for (d, c) in &self.parts {
            let s_weight = c / d.len() as f64;
            for (x, y) in d.iter() {
                let s = class_sign(y, k);
                let slack = 1.0 - s * vector::dot(v, x);
                if slack > 0.0 {
                    loss += s_weight * slack * slack;
                    vector::axpy(&mut grad, -2.0 * s * slack * s_weight, x);
                    for r in 0..m {
                        for col in 0..m {
                            hess[(r, col)] += 2.0 * s_weight * x[r] * x[col];
                        }
                    }
                }
            }
        }
        (loss, grad, hess)
    }

    fn solve_hinge_block(&self, k: usize, reg: f64) -> Result<ModelVector> {
        let m = self.model.feature_dim;
        let mut v = vec![0.0; m];
        let (mut f, mut g, mut h) = self.hinge_block_eval(k, reg, &v);
        let tol = 1e-10 * vector::norm(&g).max(1.0);
        for _ in 0..500 {
            if vector::norm(&g) <= tol {
                return Ok(v);
            }
            // Newton direction on the generalized Hessian, gradient direction as fallback.
            let mut dir: ModelVector = match h.clone().cholesky() {
                Some(ch) => ch.solve(&DVector::from_column_slice(&g)).iter().map(|x| -x).collect(),
                None => g.iter().map(|x| -x).collect(),
            };
            let mut slope = vector::dot(&g, &dir);
            if slope >= 0.0 {
                dir = g.iter().map(|x| -x).collect();
                slope = -vector::dot(&g, &g);
            }
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: ModelVector = v.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
                let (ft, gt, ht) = self.hinge_block_eval(k, reg, &trial);
                if ft <= f + 1e-4 * step * slope {
                    v = trial;
                    f = ft;
                    g = gt;
                    h = ht;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if vector::norm(&g) <= tol * 10.0 {
            Ok(v)
        } else {
            Err(DflError::NotConverged(format!("squared-hinge block {k} stalled at |grad| = {:e}", vector::norm(&g))))
        }
    }
}

/// Minimizer of `sum_j weights[j] * F_j` over the given datasets.
pub fn solve_optimum(model: &LossModel, parts: &[(&Dataset, f64)]) -> Result<ModelVector> {
    WeightedObjective::new(*model, parts.to_vec())?.solve_optimum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(x: Vec<f64>, y: f64) -> Dataset {
        Dataset::from_points(x.len(), &[LabeledPoint { x, y }]).unwrap()
    }

    #[test]
    fn test_ridge_loss_value() {
        let d = single(vec![1.0, 0.0], 2.0);
        let m = LossModel::ridge(2, 0.0);
        assert_eq!(m.loss(&d, &[0.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn test_ridge_optimum_shrinks() {
        let d = single(vec![1.0], 3.0);
        let m = LossModel::ridge(1, 0.5);
        let w = solve_optimum(&m, &[(&d, 1.0)]).unwrap();
        assert!((w[0] - 3.0 / 1.5).abs() < 1e-14);
    }

    #[test]
    fn test_full_batch_equals_gradient() {
        let pts: Vec<LabeledPoint> =
            (0..6).map(|i| LabeledPoint { x: vec![i as f64, 1.0], y: (i % 3) as f64 }).collect();
        let d = Dataset::from_points(2, &pts).unwrap();
        let m = LossModel::svm(2, 3, 0.01);
        let w = vec![0.1, -0.2, 0.3, 0.0, -0.5, 0.25];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = m.gradient(&d, &w).unwrap();
        let s = m.stochastic_gradient(&d, &w, 6, &mut rng).unwrap();
        for (a, b) in g.iter().zip(&s) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn test_empty_dataset_rejected() {
        let d = Dataset::new(2);
        let m = LossModel::ridge(2, 0.0);
        assert!(matches!(m.loss(&d, &[0.0, 0.0]), Err(DflError::InsufficientData(_))));
    }

    #[test]
    fn test_dimension_mismatch() {
        let d = single(vec![1.0, 0.0], 2.0);
        let m = LossModel::ridge(2, 0.0);
        assert!(matches!(m.gradient(&d, &[0.0]), Err(DflError::DimensionMismatch { .. })));
    }

    #[test]
    fn test_svm_optimum_stationary() {
        let pts: Vec<LabeledPoint> = (0..30)
            .map(|i| {
                let c = i % 3;
                let a = i as f64 * 0.37;
                LabeledPoint { x: vec![c as f64 + a.sin() * 0.3, (c as f64) * 0.5 - a.cos() * 0.2, 1.0], y: c as f64 }
            })
            .collect();
        let d = Dataset::from_points(3, &pts).unwrap();
        let m = LossModel::svm(3, 3, 1e-2);
        let w = solve_optimum(&m, &[(&d, 1.0)]).unwrap();
        let g = m.gradient(&d, &w).unwrap();
        assert!(vector::norm(&g) < 1e-9);
    }
}
