//! Non-local velocity fields `v[mu](t, x) = (H(t, .) * mu)(x) + v_l(t, x)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::linalg::{frobenius, mat_vec_acc, Matrix};

/// User-supplied interaction kernel. The `D_y H` block returned by
/// `accumulate_jacobians` is the matrix paired with measure perturbations in
/// the linearized flow and in the costate coupling.
pub trait InteractionKernel: Send + Sync {
    /// Adds `weight * H(t, x, y)` into `out`.
    fn accumulate(&self, t: f64, x: &[f64], y: &[f64], weight: f64, out: &mut [f64]);
    /// Adds `weight * D_x H(t, x, y)` into `dx` and `weight * D_y H(t, x, y)`
    /// into `dy` (row-major `d x d`).
    fn accumulate_jacobians(&self, t: f64, x: &[f64], y: &[f64], weight: f64, dx: &mut [f64], dy: &mut [f64]);
    /// `(L1, L2, M)` contributions.
    fn bounds(&self) -> LipschitzBounds;
}

/// Interaction kernel families.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    Zero,
    /// `H(x, y) = a (y - x)`.
    LinearAttraction { strength: f64 },
    /// `H(x, y) = -s (2 / sigma^2) exp(-|x - y|^2 / sigma^2) (x - y)`.
    Gaussian {
        width: f64,
        #[serde(default = "one")]
        strength: f64,
    },
    #[serde(skip)]
    Custom(Arc<dyn InteractionKernel>),
}

fn one() -> f64 {
    1.0
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Zero => write!(f, "Zero"),
            Kernel::LinearAttraction { strength } => write!(f, "LinearAttraction({strength})"),
            Kernel::Gaussian { width, strength } => write!(f, "Gaussian(width={width}, strength={strength})"),
            Kernel::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl PartialEq for Kernel {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Kernel::Zero, Kernel::Zero) => true,
            (Kernel::LinearAttraction { strength: a }, Kernel::LinearAttraction { strength: b }) => a == b,
            (Kernel::Gaussian { width: w1, strength: s1 }, Kernel::Gaussian { width: w2, strength: s2 }) => {
                w1 == w2 && s1 == s2
            }
            (Kernel::Custom(a), Kernel::Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

pub const KERNEL_FAMILIES: &[&str] = &["zero", "linear_attraction", "gaussian"];

impl Kernel {
    pub fn is_zero(&self) -> bool {
        matches!(self, Kernel::Zero)
    }

    #[inline]
    pub(crate) fn accumulate(&self, t: f64, x: &[f64], y: &[f64], weight: f64, out: &mut [f64]) {
        match self {
            Kernel::Zero => {}
            Kernel::LinearAttraction { strength } => {
                for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
                    *o += weight * strength * (yi - xi);
                }
            }
            Kernel::Gaussian { width, strength } => {
                let s2 = width * width;
                let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                let c = -weight * strength * 2.0 / s2 * (-r2 / s2).exp();
                for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
                    *o += c * (xi - yi);
                }
            }
            Kernel::Custom(k) => k.accumulate(t, x, y, weight, out),
        }
    }

    #[inline]
    pub(crate) fn accumulate_jacobians(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        weight: f64,
        dx: &mut [f64],
        dy: &mut [f64],
    ) {
        let d = x.len();
        match self {
            Kernel::Zero => {}
            Kernel::LinearAttraction { strength } => {
                for i in 0..d {
                    dx[i * d + i] -= weight * strength;
                    dy[i * d + i] += weight * strength;
                }
            }
            Kernel::Gaussian { .. } => {
                let mut tmp = [0.0; 9];
                if d <= 3 {
                    self.gaussian_dx(x, y, &mut tmp[..d * d]);
                    for k in 0..d * d {
                        dx[k] += weight * tmp[k];
                        dy[k] -= weight * tmp[k];
                    }
                } else {
                    let mut buf = vec![0.0; d * d];
                    self.gaussian_dx(x, y, &mut buf);
                    for k in 0..d * d {
                        dx[k] += weight * buf[k];
                        dy[k] -= weight * buf[k];
                    }
                }
            }
            Kernel::Custom(k) => k.accumulate_jacobians(t, x, y, weight, dx, dy),
        }
    }

    /// Adds `weight * D_y H(t, x, y)` only.
    #[inline]
    pub(crate) fn accumulate_jacobian_y(&self, t: f64, x: &[f64], y: &[f64], weight: f64, dy: &mut [f64]) {
        let d = x.len();
        match self {
            Kernel::Zero => {}
            Kernel::LinearAttraction { strength } => {
                for i in 0..d {
                    dy[i * d + i] += weight * strength;
                }
            }
            Kernel::Gaussian { .. } => {
                let mut tmp = [0.0; 9];
                if d <= 3 {
                    self.gaussian_dx(x, y, &mut tmp[..d * d]);
                    for k in 0..d * d {
                        dy[k] -= weight * tmp[k];
                    }
                } else {
                    let mut buf = vec![0.0; d * d];
                    self.gaussian_dx(x, y, &mut buf);
                    for k in 0..d * d {
                        dy[k] -= weight * buf[k];
                    }
                }
            }
            Kernel::Custom(k) => {
                let mut scratch = vec![0.0; d * d];
                k.accumulate_jacobians(t, x, y, weight, &mut scratch, dy);
            }
        }
    }

    // D_x H = -s (2/sigma^2) g [I - (2/sigma^2) z z^T], z = x - y; D_y H = -D_x H.
    fn gaussian_dx(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let Kernel::Gaussian { width, strength } = self else { unreachable!() };
        let d = x.len();
        let s2 = width * width;
        let mut z = [0.0; 3];
        let zs: Vec<f64>;
        let z: &[f64] = if d <= 3 {
            for k in 0..d {
                z[k] = x[k] - y[k];
            }
            &z[..d]
        } else {
            zs = x.iter().zip(y).map(|(a, b)| a - b).collect();
            &zs
        };
        let r2: f64 = z.iter().map(|v| v * v).sum();
        let c = -strength * 2.0 / s2 * (-r2 / s2).exp();
        for i in 0..d {
            for j in 0..d {
                let delta = if i == j { 1.0 } else { 0.0 };
                out[i * d + j] = c * (delta - 2.0 / s2 * z[i] * z[j]);
            }
        }
    }

    fn bounds(&self) -> LipschitzBounds {
        match self {
            Kernel::Zero => LipschitzBounds::default(),
            // Attraction keeps particles in the convex hull of the cloud, so it
            // adds nothing to radial growth; repulsion grows like 2|a|(1+|x|).
            Kernel::LinearAttraction { strength } => LipschitzBounds {
                l1: strength.abs(),
                l2: strength.abs(),
                m: if *strength >= 0.0 { 0.0 } else { 2.0 * strength.abs() },
            },
            Kernel::Gaussian { width, strength } => {
                let lip = 2.0 * strength.abs() / (width * width);
                LipschitzBounds {
                    l1: lip,
                    l2: lip,
                    m: strength.abs() * std::f64::consts::SQRT_2 * (-0.5f64).exp() / width.abs(),
                }
            }
            Kernel::Custom(k) => k.bounds(),
        }
    }
}

/// Local drift families `v_l(t, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Drift {
    Zero,
    Constant { value: Vec<f64> },
    /// `v_l(x) = B x + c`, `matrix` row-major.
    Linear { matrix: Vec<f64>, offset: Vec<f64> },
}

pub const DRIFT_FAMILIES: &[&str] = &["zero", "constant", "linear"];

impl Drift {
    pub fn is_zero(&self) -> bool {
        matches!(self, Drift::Zero)
    }

    #[inline]
    fn accumulate(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Drift::Zero => {}
            Drift::Constant { value } => {
                for (o, v) in out.iter_mut().zip(value) {
                    *o += v;
                }
            }
            Drift::Linear { matrix, offset } => {
                mat_vec_acc(matrix, x, 1.0, out);
                for (o, v) in out.iter_mut().zip(offset) {
                    *o += v;
                }
            }
        }
    }

    #[inline]
    fn accumulate_jacobian(&self, out: &mut [f64]) {
        if let Drift::Linear { matrix, .. } = self {
            for (o, m) in out.iter_mut().zip(matrix) {
                *o += m;
            }
        }
    }

    fn bounds(&self) -> LipschitzBounds {
        match self {
            Drift::Zero => LipschitzBounds::default(),
            Drift::Constant { value } => LipschitzBounds {
                l1: 0.0,
                l2: 0.0,
                m: frobenius(value),
            },
            Drift::Linear { matrix, offset } => {
                let b = frobenius(matrix);
                LipschitzBounds {
                    l1: b,
                    l2: 0.0,
                    m: b.max(frobenius(offset)),
                }
            }
        }
    }

    pub(crate) fn dim(&self) -> Option<usize> {
        match self {
            Drift::Zero => None,
            Drift::Constant { value } => Some(value.len()),
            Drift::Linear { offset, .. } => Some(offset.len()),
        }
    }
}

/// Constants of the sublinearity / Lipschitz hypotheses on the field:
/// `|v[mu](x)| <= M (1 + |x|)`, `Lip_x <= L1`, `|v[mu] - v[nu]|_inf <= L2 W1`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LipschitzBounds {
    pub l1: f64,
    pub l2: f64,
    pub m: f64,
}

/// Kernel interaction plus local drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlocalField {
    pub kernel: Kernel,
    #[serde(default = "zero_drift")]
    pub drift: Drift,
}

fn zero_drift() -> Drift {
    Drift::Zero
}

impl NonlocalField {
    pub fn new(kernel: Kernel, drift: Drift) -> Self {
        Self { kernel, drift }
    }

    pub fn zero() -> Self {
        Self::new(Kernel::Zero, Drift::Zero)
    }

    pub fn linear_attraction(strength: f64) -> Self {
        Self::new(Kernel::LinearAttraction { strength }, Drift::Zero)
    }

    pub fn gaussian(width: f64, strength: f64) -> Self {
        Self::new(Kernel::Gaussian { width, strength }, Drift::Zero)
    }

    /// Whether `v[mu]` actually depends on `mu`.
    pub fn is_nonlocal(&self) -> bool {
        !self.kernel.is_zero()
    }

    pub fn lipschitz_bounds(&self) -> LipschitzBounds {
        let k = self.kernel.bounds();
        let l = self.drift.bounds();
        LipschitzBounds {
            l1: k.l1 + l.l1,
            l2: k.l2 + l.l2,
            m: k.m + l.m,
        }
    }

    /// Adds `v[mu](t, x)` into `out`, with `mu` given as flat points + weights.
    #[inline]
    pub(crate) fn accumulate_velocity(&self, t: f64, points: &[f64], weights: &[f64], x: &[f64], out: &mut [f64]) {
        let d = x.len();
        if !self.kernel.is_zero() {
            for (y, &w) in points.chunks_exact(d).zip(weights) {
                self.kernel.accumulate(t, x, y, w, out);
            }
        }
        self.drift.accumulate(x, out);
    }

    /// Adds `D_x v[mu](t, x)` into `out`.
    #[inline]
    pub(crate) fn accumulate_jacobian_x(&self, t: f64, points: &[f64], weights: &[f64], x: &[f64], out: &mut [f64]) {
        let d = x.len();
        match &self.kernel {
            Kernel::Zero => {}
            Kernel::LinearAttraction { strength } => {
                for i in 0..d {
                    out[i * d + i] -= strength;
                }
            }
            kernel => {
                let mut scratch = vec![0.0; d * d];
                for (y, &w) in points.chunks_exact(d).zip(weights) {
                    kernel.accumulate_jacobians(t, x, y, w, out, &mut scratch);
                }
            }
        }
        self.drift.accumulate_jacobian(out);
    }

    pub(crate) fn check_dim(&self, dim: usize) -> bool {
        let drift_ok = self.drift.dim().is_none_or(|k| k == dim)
            && match &self.drift {
                Drift::Linear { matrix, .. } => matrix.len() == dim * dim,
                _ => true,
            };
        drift_ok
    }
}

/// `v[mu](t, x) + omega(x)`; `omega` omitted when `None`.
pub fn eval_velocity(
    field: &NonlocalField,
    control: Option<&super::ControlField>,
    mu: &crate::measures::EmpiricalMeasure,
    t: f64,
    x: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    field.accumulate_velocity(t, mu.points_flat(), mu.weights(), x, &mut out);
    if let Some(c) = control {
        c.accumulate(x, &mut out);
    }
    out
}

/// Analytic `(D_x H(t, x, y), D_y H(t, x, y))`.
pub fn kernel_jacobians(kernel: &Kernel, t: f64, x: &[f64], y: &[f64]) -> (Matrix, Matrix) {
    let d = x.len();
    let mut dx = vec![0.0; d * d];
    let mut dy = vec![0.0; d * d];
    kernel.accumulate_jacobians(t, x, y, 1.0, &mut dx, &mut dy);
    (Matrix::from_row_major(d, dx), Matrix::from_row_major(d, dy))
}

/// `H(t, x, y)`.
pub fn kernel_value(kernel: &Kernel, t: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    kernel.accumulate(t, x, y, 1.0, &mut out);
    out
}
