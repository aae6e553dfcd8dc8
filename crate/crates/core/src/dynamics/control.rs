//! Admissible controls: spatial C1 fields, and piecewise-constant schedules
//! of them in time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius, mat_vec_acc};

/// A C1 vector field on `R^d` used as a basis element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Feature {
    /// `phi(x) = e`.
    Constant { direction: Vec<f64> },
    /// `phi(x) = M x`, `matrix` row-major.
    Linear { matrix: Vec<f64> },
    /// `phi(x) = e (1 - |x - c|^2 / r^2)^2` inside the ball, zero outside.
    Bump {
        center: Vec<f64>,
        radius: f64,
        direction: Vec<f64>,
    },
}

pub const FEATURE_FAMILIES: &[&str] = &["constant", "linear", "bump"];

impl Feature {
    pub fn dim(&self) -> usize {
        match self {
            Feature::Constant { direction } | Feature::Bump { direction, .. } => direction.len(),
            Feature::Linear { matrix } => (matrix.len() as f64).sqrt().round() as usize,
        }
    }

    fn validate(&self, dim: usize) -> std::result::Result<(), String> {
        match self {
            Feature::Constant { direction } if direction.len() != dim => {
                Err(format!("constant feature has length {}, expected {dim}", direction.len()))
            }
            Feature::Linear { matrix } if matrix.len() != dim * dim => {
                Err(format!("linear feature has {} entries, expected {}", matrix.len(), dim * dim))
            }
            Feature::Bump { center, radius, direction } => {
                if center.len() != dim || direction.len() != dim {
                    Err(format!("bump feature vectors must have length {dim}"))
                } else if !(*radius > 0.0) {
                    Err(format!("bump radius must be positive, got {radius}"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    #[inline]
    fn accumulate(&self, x: &[f64], s: f64, out: &mut [f64]) {
        match self {
            Feature::Constant { direction } => {
                for (o, e) in out.iter_mut().zip(direction) {
                    *o += s * e;
                }
            }
            Feature::Linear { matrix } => mat_vec_acc(matrix, x, s, out),
            Feature::Bump { center, radius, direction } => {
                let q = bump_ratio(x, center, *radius);
                if q < 1.0 {
                    let g = (1.0 - q) * (1.0 - q);
                    for (o, e) in out.iter_mut().zip(direction) {
                        *o += s * g * e;
                    }
                }
            }
        }
    }

    #[inline]
    fn accumulate_jacobian(&self, x: &[f64], s: f64, out: &mut [f64]) {
        let d = x.len();
        match self {
            Feature::Constant { .. } => {}
            Feature::Linear { matrix } => {
                for (o, m) in out.iter_mut().zip(matrix) {
                    *o += s * m;
                }
            }
            Feature::Bump { center, radius, direction } => {
                let q = bump_ratio(x, center, *radius);
                if q < 1.0 {
                    let c = -4.0 * (1.0 - q) / (radius * radius);
                    for i in 0..d {
                        for j in 0..d {
                            out[i * d + j] += s * direction[i] * c * (x[j] - center[j]);
                        }
                    }
                }
            }
        }
    }
}

fn bump_ratio(x: &[f64], c: &[f64], r: f64) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (r * r)
}

// sup of |grad (1 - s^2/r^2)^2| over s, attained at s = r / sqrt(3).
fn bump_gradient_bound(radius: f64) -> f64 {
    8.0 / (3.0 * 3f64.sqrt() * radius)
}

/// A control value `omega in U`: either affine `A x + b` or a linear
/// combination of fixed features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlField {
    Affine { matrix: Vec<f64>, offset: Vec<f64> },
    Basis { features: Vec<Feature>, coefficients: Vec<f64> },
}

impl ControlField {
    pub fn zero_affine(dim: usize) -> Self {
        ControlField::Affine {
            matrix: vec![0.0; dim * dim],
            offset: vec![0.0; dim],
        }
    }

    pub fn affine(matrix: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        let d = offset.len();
        if matrix.len() != d * d {
            return Err(Error::DimensionMismatch { expected: d * d, got: matrix.len() });
        }
        Ok(ControlField::Affine { matrix, offset })
    }

    /// The constant field `omega(x) = b`, as an affine field with `A = 0`.
    pub fn constant(b: Vec<f64>) -> Self {
        let d = b.len();
        ControlField::Affine {
            matrix: vec![0.0; d * d],
            offset: b,
        }
    }

    pub fn basis(features: Vec<Feature>, coefficients: Vec<f64>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("basis control needs at least one feature".into()));
        }
        if features.len() != coefficients.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                got: coefficients.len(),
            });
        }
        let dim = features[0].dim();
        for f in &features {
            f.validate(dim).map_err(Error::InvalidArgument)?;
        }
        Ok(ControlField::Basis { features, coefficients })
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlField::Affine { offset, .. } => offset.len(),
            ControlField::Basis { features, .. } => features[0].dim(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            ControlField::Affine { matrix, offset } => matrix.len() + offset.len(),
            ControlField::Basis { coefficients, .. } => coefficients.len(),
        }
    }

    /// Parameter vector: `A` row-major then `b`, or the basis coefficients.
    pub fn params(&self) -> Vec<f64> {
        match self {
            ControlField::Affine { matrix, offset } => matrix.iter().chain(offset).copied().collect(),
            ControlField::Basis { coefficients, .. } => coefficients.clone(),
        }
    }

    /// Same family, new parameters. Panics on a length mismatch.
    pub fn with_params(&self, params: &[f64]) -> Self {
        assert_eq!(params.len(), self.num_params(), "parameter count");
        match self {
            ControlField::Affine { matrix, .. } => {
                let k = matrix.len();
                ControlField::Affine {
                    matrix: params[..k].to_vec(),
                    offset: params[k..].to_vec(),
                }
            }
            ControlField::Basis { features, .. } => ControlField::Basis {
                features: features.clone(),
                coefficients: params.to_vec(),
            },
        }
    }

    #[inline]
    pub(crate) fn accumulate(&self, x: &[f64], out: &mut [f64]) {
        match self {
            ControlField::Affine { matrix, offset } => {
                mat_vec_acc(matrix, x, 1.0, out);
                for (o, b) in out.iter_mut().zip(offset) {
                    *o += b;
                }
            }
            ControlField::Basis { features, coefficients } => {
                for (f, &c) in features.iter().zip(coefficients) {
                    if c != 0.0 {
                        f.accumulate(x, c, out);
                    }
                }
            }
        }
    }

    #[inline]
    pub(crate) fn accumulate_jacobian(&self, x: &[f64], out: &mut [f64]) {
        match self {
            ControlField::Affine { matrix, .. } => {
                for (o, m) in out.iter_mut().zip(matrix) {
                    *o += m;
                }
            }
            ControlField::Basis { features, coefficients } => {
                for (f, &c) in features.iter().zip(coefficients) {
                    if c != 0.0 {
                        f.accumulate_jacobian(x, c, out);
                    }
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.accumulate(x, &mut out);
        out
    }

    /// `D_x omega(x)`, row-major.
    pub fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut out = vec![0.0; d * d];
        self.accumulate_jacobian(x, &mut out);
        out
    }

    /// `d omega / d theta_k (x)`; the field is linear in its parameters.
    pub fn param_derivative(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut out = vec![0.0; d];
        match self {
            ControlField::Affine { matrix, .. } => {
                if k < matrix.len() {
                    out[k / d] = x[k % d];
                } else {
                    out[k - matrix.len()] = 1.0;
                }
            }
            ControlField::Basis { features, .. } => features[k].accumulate(x, 1.0, &mut out),
        }
        out
    }

    /// Upper bound of `sup_{|x| <= R} |omega(x)| + |D omega(x)|` (Frobenius
    /// norm for the Jacobian). Exact-form bounds per family, no sampling.
    pub fn c1_norm(&self, radius: f64) -> f64 {
        match self {
            ControlField::Affine { matrix, offset } => {
                let a = frobenius(matrix);
                a * radius + frobenius(offset) + a
            }
            ControlField::Basis { features, coefficients } => {
                let d = self.dim();
                let mut constant = vec![0.0; d];
                let mut linear = vec![0.0; d * d];
                let mut bumps = 0.0;
                for (f, &c) in features.iter().zip(coefficients) {
                    match f {
                        Feature::Constant { direction } => {
                            for (k, e) in constant.iter_mut().zip(direction) {
                                *k += c * e;
                            }
                        }
                        Feature::Linear { matrix } => {
                            for (k, m) in linear.iter_mut().zip(matrix) {
                                *k += c * m;
                            }
                        }
                        Feature::Bump { radius: r, direction, .. } => {
                            bumps += c.abs() * frobenius(direction) * (1.0 + bump_gradient_bound(*r));
                        }
                    }
                }
                let a = frobenius(&linear);
                frobenius(&constant) + a * (radius + 1.0) + bumps
            }
        }
    }

    /// `G` with `|omega(x)| <= G (1 + |x|)` everywhere.
    pub fn growth_constant(&self) -> f64 {
        match self {
            ControlField::Affine { matrix, offset } => frobenius(matrix).max(frobenius(offset)),
            ControlField::Basis { .. } => {
                let lin = self.linear_part_norm();
                let rest = self.c1_norm(0.0) - lin;
                lin.max(rest)
            }
        }
    }

    /// Bound on `sup_x |D omega(x)|`, the global Lipschitz constant.
    pub fn lipschitz_bound(&self) -> f64 {
        let bumps: f64 = match self {
            ControlField::Affine { .. } => 0.0,
            ControlField::Basis { features, coefficients } => features
                .iter()
                .zip(coefficients)
                .map(|(f, c)| match f {
                    Feature::Bump { radius, direction, .. } => {
                        c.abs() * frobenius(direction) * bump_gradient_bound(*radius)
                    }
                    _ => 0.0,
                })
                .sum(),
        };
        self.linear_part_norm() + bumps
    }

    fn linear_part_norm(&self) -> f64 {
        match self {
            ControlField::Affine { matrix, .. } => frobenius(matrix),
            ControlField::Basis { features, coefficients } => {
                let d = self.dim();
                let mut linear = vec![0.0; d * d];
                for (f, &c) in features.iter().zip(coefficients) {
                    if let Feature::Linear { matrix } = f {
                        for (k, m) in linear.iter_mut().zip(matrix) {
                            *k += c * m;
                        }
                    }
                }
                frobenius(&linear)
            }
        }
    }

    /// Maps the field into the C1 ball `{ c1_norm(radius) <= bound }` and
    /// reports whether it moved. Affine fields get the Euclidean projection
    /// of their parameters; basis fields are scaled along their ray.
    pub fn project(&self, radius: f64, bound: f64) -> (Self, bool) {
        let norm = self.c1_norm(radius);
        if norm <= bound * (1.0 + 1e-12) {
            return (self.clone(), false);
        }
        match self {
            ControlField::Affine { matrix, offset } => {
                let (s, t) = project_onto_triangle(frobenius(matrix), frobenius(offset), radius + 1.0, bound);
                let rescale = |v: &[f64], from: f64, to: f64| -> Vec<f64> {
                    if from > 0.0 {
                        v.iter().map(|x| x * (to / from)).collect()
                    } else {
                        vec![0.0; v.len()]
                    }
                };
                let matrix = rescale(matrix, frobenius(matrix), s);
                let offset = rescale(offset, frobenius(offset), t);
                (ControlField::Affine { matrix, offset }, true)
            }
            ControlField::Basis { .. } => {
                let s = bound / norm;
                let params: Vec<f64> = self.params().iter().map(|p| p * s).collect();
                (self.with_params(&params), true)
            }
        }
    }
}

/// Closest point to `(s0, t0)` (both nonnegative) in
/// `{ s, t >= 0 : alpha s + t <= bound }`, for a point outside it.
fn project_onto_triangle(s0: f64, t0: f64, alpha: f64, bound: f64) -> (f64, f64) {
    let excess = (alpha * s0 + t0 - bound) / (alpha * alpha + 1.0);
    let (s, t) = (s0 - excess * alpha, t0 - excess);
    if s < 0.0 {
        (0.0, bound)
    } else if t < 0.0 {
        (bound / alpha, 0.0)
    } else {
        // Land exactly on the boundary despite rounding.
        (s, (bound - alpha * s).max(0.0))
    }
}

/// Piecewise-constant control schedule: `fields[k]` acts on
/// `[grid[k], grid[k+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    grid: Vec<f64>,
    fields: Vec<ControlField>,
}

impl ControlSignal {
    pub fn new(grid: Vec<f64>, fields: Vec<ControlField>) -> Result<Self> {
        if grid.len() < 2 || fields.len() != grid.len() - 1 {
            return Err(Error::TimeGrid(format!(
                "{} grid points for {} control fields",
                grid.len(),
                fields.len()
            )));
        }
        if grid[0] != 0.0 {
            return Err(Error::TimeGrid(format!("control grid must start at 0, got {}", grid[0])));
        }
        if let Some(w) = grid.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::TimeGrid(format!("control grid not increasing at {} -> {}", w[0], w[1])));
        }
        let dim = fields[0].dim();
        if let Some(f) = fields.iter().find(|f| f.dim() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: f.dim() });
        }
        Ok(Self { grid, fields })
    }

    /// `intervals` equal pieces on `[0, horizon]`, all set to `field`.
    pub fn uniform(horizon: f64, intervals: usize, field: ControlField) -> Result<Self> {
        if intervals == 0 || !(horizon > 0.0) {
            return Err(Error::TimeGrid("need a positive horizon and at least one interval".into()));
        }
        let grid = uniform_grid(horizon, intervals);
        Self::new(grid, vec![field; intervals])
    }

    /// Equal pieces on `[0, horizon]` with the given fields.
    pub fn piecewise(horizon: f64, fields: Vec<ControlField>) -> Result<Self> {
        if fields.is_empty() || !(horizon > 0.0) {
            return Err(Error::TimeGrid("need a positive horizon and at least one interval".into()));
        }
        Self::new(uniform_grid(horizon, fields.len()), fields)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn fields(&self) -> &[ControlField] {
        &self.fields
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn dim(&self) -> usize {
        self.fields[0].dim()
    }

    pub fn num_intervals(&self) -> usize {
        self.fields.len()
    }

    /// Index of the interval `[t_k, t_{k+1})` containing `t`; clamps outside.
    pub fn interval_index(&self, t: f64) -> usize {
        let k = self.grid.partition_point(|&g| g <= t);
        k.saturating_sub(1).min(self.fields.len() - 1)
    }

    /// Index of the interval `(t_k, t_{k+1}]` containing `t` (left limit).
    pub fn interval_index_left(&self, t: f64) -> usize {
        let k = self.grid.partition_point(|&g| g < t);
        k.saturating_sub(1).min(self.fields.len() - 1)
    }

    /// Right-continuous evaluation `u(t)`.
    pub fn field_at(&self, t: f64) -> &ControlField {
        &self.fields[self.interval_index(t)]
    }

    /// Left limit `u(t-)`, the value a needle ending at `t` replaces.
    pub fn field_before(&self, t: f64) -> &ControlField {
        &self.fields[self.interval_index_left(t)]
    }

    /// All interval parameters concatenated.
    pub fn params(&self) -> Vec<f64> {
        self.fields.iter().flat_map(ControlField::params).collect()
    }

    pub fn num_params(&self) -> usize {
        self.fields.iter().map(ControlField::num_params).sum()
    }

    pub fn with_params(&self, params: &[f64]) -> Self {
        assert_eq!(params.len(), self.num_params(), "parameter count");
        let mut offset = 0;
        let fields = self
            .fields
            .iter()
            .map(|f| {
                let k = f.num_params();
                let g = f.with_params(&params[offset..offset + k]);
                offset += k;
                g
            })
            .collect();
        Self {
            grid: self.grid.clone(),
            fields,
        }
    }

    /// Replaces the control on `[start, end)` by `field`, splitting intervals.
    pub fn overwrite(&self, start: f64, end: f64, field: &ControlField) -> Result<Self> {
        let horizon = self.horizon();
        if !(start >= 0.0 && end > start && end <= horizon * (1.0 + 1e-15)) {
            return Err(Error::TimeGrid(format!(
                "cannot overwrite [{start}, {end}) on [0, {horizon}]"
            )));
        }
        let end = end.min(horizon);
        // Pieces carry their origin (`None` for the inserted field); a piece
        // merges into its predecessor only when both hold the same value and
        // share an origin or one of them is the inserted field.
        let mut grid = vec![0.0];
        let mut fields: Vec<ControlField> = Vec::new();
        let mut origins: Vec<Option<usize>> = Vec::new();
        let mut push = |t1: f64, f: &ControlField, origin: Option<usize>| {
            let t0 = *grid.last().unwrap();
            if t1 <= t0 {
                return;
            }
            let merge = match (fields.last(), origins.last()) {
                (Some(last), Some(&o)) => last == f && (o == origin || o.is_none() || origin.is_none()),
                _ => false,
            };
            if merge {
                *grid.last_mut().unwrap() = t1;
                let o = origins.last_mut().unwrap();
                *o = o.or(origin);
            } else {
                grid.push(t1);
                fields.push(f.clone());
                origins.push(origin);
            }
        };
        for (k, f) in self.fields.iter().enumerate() {
            let (a, b) = (self.grid[k], self.grid[k + 1]);
            push(b.min(start).max(a), f, Some(k));
            if b > start && a < end {
                push(end.min(b), field, None);
            }
            if b > end {
                push(b, f, Some(k));
            }
        }
        Self::new(grid, fields)
    }
}

pub(crate) fn uniform_grid(horizon: f64, intervals: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=intervals).map(|k| horizon * k as f64 / intervals as f64).collect();
    grid[intervals] = horizon;
    grid
}
