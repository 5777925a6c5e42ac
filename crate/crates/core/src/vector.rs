//! Dense vector helpers on `Vec<f64>` model parameters.

pub type ModelVector = Vec<f64>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist_sq(a, b).sqrt()
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sub(a: &[f64], b: &[f64]) -> ModelVector {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `y += s * x`
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// `sum_j weights[j] * vectors[j]`, accumulated in index order.
pub fn weighted_sum<'a, I>(dim: usize, terms: I) -> ModelVector
where
    I: IntoIterator<Item = (f64, &'a [f64])>,
{
    let mut iter = terms.into_iter();
    let Some((w0, v0)) = iter.next() else {
        return vec![0.0; dim];
    };
    let mut out: ModelVector = v0.iter().map(|x| w0 * x).collect();
    for (w, v) in iter {
        axpy(&mut out, w, v);
    }
    out
}

/// `(1 - a) * x + a * y`
pub fn convex_combination(x: &[f64], y: &[f64], a: f64) -> ModelVector {
    x.iter().zip(y).map(|(xi, yi)| (1.0 - a) * xi + a * yi).collect()
}
