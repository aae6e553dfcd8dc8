//! Weighted particle clouds standing in for compactly supported probability
//! measures, and the elementary operations on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization slack accepted before weights are rescaled to sum to one.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;
/// Slack on plan marginals.
pub const MARGINAL_TOLERANCE: f64 = 1e-10;
// Sums further than this from one are treated as caller bugs rather than drift.
const RENORMALIZE_LIMIT: f64 = 1e-9;

/// A finitely supported probability measure `sum_i w_i delta_{x_i}` on `R^d`.
///
/// Points are stored row-major in a flat buffer of length `n * dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Builds a measure from flat points and weights. Weights must be
    /// nonnegative and sum to one up to accumulation error; they are
    /// renormalized exactly.
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if weights.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if points.len() != weights.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: weights.len() * dim,
                got: points.len(),
            });
        }
        if let Some(i) = points.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite coordinate in particle {}",
                i / dim
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidWeights(format!("weight {w} is negative or non-finite")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > RENORMALIZE_LIMIT {
            return Err(Error::InvalidWeights(format!("weights sum to {total}, expected 1")));
        }
        let mut measure = Self { dim, points, weights };
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            measure.weights.iter_mut().for_each(|w| *w /= total);
        }
        Ok(measure)
    }

    /// Like [`EmpiricalMeasure::new`] but accepts any positive total mass.
    pub fn from_unnormalized(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidWeights(format!("total mass {total} is not positive")));
        }
        Self::new(dim, points, weights.into_iter().map(|w| w / total).collect())
    }

    /// Uniform weights `1/n` on the given points.
    pub fn uniform(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::EmptyMeasure);
        }
        let dim = points[0].len();
        let flat = flatten(points, dim)?;
        Self::new(dim, flat, vec![1.0 / n as f64; n])
    }

    /// Explicit weights on the given points.
    pub fn weighted(points: &[Vec<f64>], weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        let dim = points[0].len();
        let flat = flatten(points, dim)?;
        Self::new(dim, flat, weights)
    }

    /// Dirac mass at `x`.
    pub fn dirac(x: &[f64]) -> Result<Self> {
        Self::new(x.len(), x.to_vec(), vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn points_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.points().map(<[f64]>::to_vec).collect()
    }

    /// Same weights, new positions. Used by flows, which move particles but
    /// never split mass.
    pub(crate) fn with_points(&self, points: Vec<f64>) -> Self {
        debug_assert_eq!(points.len(), self.points.len());
        Self {
            dim: self.dim,
            points,
            weights: self.weights.clone(),
        }
    }

    /// `f_# mu`: maps every particle through `f`, keeping its weight.
    pub fn pushforward<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let mut out = Vec::with_capacity(self.points.len());
        let mut dim = None;
        for x in self.points() {
            let y = f(x);
            match dim {
                None => dim = Some(y.len()),
                Some(d) if d != y.len() => {
                    return Err(Error::DimensionMismatch { expected: d, got: y.len() })
                }
                _ => {}
            }
            out.extend(y);
        }
        Self::new(dim.unwrap_or(self.dim), out, self.weights.clone())
    }

    /// `sum_i w_i phi(x_i)` for a vector-valued integrand.
    pub fn integrate<F>(&self, phi: F) -> Vec<f64>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let mut acc: Vec<f64> = Vec::new();
        for (x, &w) in self.points().zip(&self.weights) {
            let v = phi(x);
            if acc.is_empty() {
                acc = vec![0.0; v.len()];
            }
            for (a, vi) in acc.iter_mut().zip(v) {
                *a += w * vi;
            }
        }
        acc
    }

    pub fn integrate_scalar<F>(&self, phi: F) -> f64
    where
        F: Fn(&[f64]) -> f64,
    {
        self.points().zip(&self.weights).map(|(x, &w)| w * phi(x)).sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (x, &w) in self.points().zip(&self.weights) {
            for (mk, xk) in m.iter_mut().zip(x) {
                *mk += w * xk;
            }
        }
        m
    }

    /// Half the mean squared deviation from the average.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        0.5 * self.integrate_scalar(|x| dist2(x, &m))
    }

    /// `int |x|^p dmu`.
    pub fn moment(&self, p: f64) -> f64 {
        self.integrate_scalar(|x| norm(x).powf(p))
    }

    /// Largest norm among particles carrying positive mass.
    pub fn support_radius(&self) -> f64 {
        self.points()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(x, _)| norm(x))
            .fold(0.0, f64::max)
    }
}

fn flatten(points: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    let mut flat = Vec::with_capacity(points.len() * dim);
    for p in points {
        if p.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
        }
        flat.extend_from_slice(p);
    }
    Ok(flat)
}

/// A coupling between two empirical measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePlan {
    source: EmpiricalMeasure,
    target: EmpiricalMeasure,
    /// Row-major `n x m`.
    coupling: Vec<f64>,
}

impl DiscretePlan {
    pub fn new(source: EmpiricalMeasure, target: EmpiricalMeasure, coupling: Vec<f64>) -> Result<Self> {
        let (n, m) = (source.len(), target.len());
        if coupling.len() != n * m {
            return Err(Error::DimensionMismatch { expected: n * m, got: coupling.len() });
        }
        if coupling.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidWeights("coupling entries must be nonnegative".into()));
        }
        let plan = Self { source, target, coupling };
        let (rows, cols) = plan.marginal_errors();
        if rows > MARGINAL_TOLERANCE || cols > MARGINAL_TOLERANCE {
            return Err(Error::InvalidWeights(format!(
                "plan marginals off by {rows:e} (rows) / {cols:e} (columns)"
            )));
        }
        Ok(plan)
    }

    /// Plan induced by a map: `(I x f)_# mu`.
    pub fn from_map<F>(source: &EmpiricalMeasure, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let target = source.pushforward(f)?;
        let n = source.len();
        let mut coupling = vec![0.0; n * n];
        for i in 0..n {
            coupling[i * n + i] = source.weights[i];
        }
        Self::new(source.clone(), target, coupling)
    }

    /// Product plan `mu (x) nu`.
    pub fn product(source: &EmpiricalMeasure, target: &EmpiricalMeasure) -> Result<Self> {
        let coupling = source
            .weights
            .iter()
            .flat_map(|a| target.weights.iter().map(move |b| a * b))
            .collect();
        Self::new(source.clone(), target.clone(), coupling)
    }

    pub fn source(&self) -> &EmpiricalMeasure {
        &self.source
    }

    pub fn target(&self) -> &EmpiricalMeasure {
        &self.target
    }

    pub fn coupling(&self) -> &[f64] {
        &self.coupling
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.target.len() + j]
    }

    /// Max absolute deviation of row and column sums from the marginals.
    pub fn marginal_errors(&self) -> (f64, f64) {
        let (n, m) = (self.source.len(), self.target.len());
        let mut cols = vec![0.0; m];
        let mut row_err: f64 = 0.0;
        for i in 0..n {
            let row = &self.coupling[i * m..(i + 1) * m];
            row_err = row_err.max((row.iter().sum::<f64>() - self.source.weights[i]).abs());
            for (c, v) in cols.iter_mut().zip(row) {
                *c += v;
            }
        }
        let col_err = cols
            .iter()
            .zip(&self.target.weights)
            .map(|(c, b)| (c - b).abs())
            .fold(0.0, f64::max);
        (row_err, col_err)
    }

    /// `sum_ij gamma_ij |x_i - y_j|^p`.
    pub fn cost(&self, p: f64) -> f64 {
        let m = self.target.len();
        let mut total = 0.0;
        for (i, x) in self.source.points().enumerate() {
            for (j, y) in self.target.points().enumerate() {
                let g = self.coupling[i * m + j];
                if g > 0.0 {
                    total += g * dist2(x, y).sqrt().powf(p);
                }
            }
        }
        total
    }
}

/// Barycentric projection of a plan: `bar y_i = sum_j gamma_ij y_j / w_i`.
/// Entries for zero-weight source particles are `None`.
pub fn plan_barycenter(plan: &DiscretePlan) -> Vec<Option<Vec<f64>>> {
    let d = plan.target.dim;
    let m = plan.target.len();
    plan.source
        .weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            if w <= 0.0 {
                return None;
            }
            let mut bar = vec![0.0; d];
            for (j, y) in plan.target.points().enumerate() {
                // Dividing each share first keeps map-induced plans exact.
                let share = plan.coupling[i * m + j] / w;
                if share == 0.0 {
                    continue;
                }
                for (b, yk) in bar.iter_mut().zip(y) {
                    *b += share * yk;
                }
            }
            Some(bar)
        })
        .collect()
}

pub(crate) fn dist2(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}
