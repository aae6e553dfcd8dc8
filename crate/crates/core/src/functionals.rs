//! Terminal and running costs with their Wasserstein gradients.
//!
//! Every gradient is returned as the per-particle barycenter map
//! `x_i -> gamma(x_i)`, which is the object paired against perturbation
//! fields in the first-order machinery.

use serde::{Deserialize, Serialize};

use crate::dynamics::ControlField;
use crate::error::{Error, Result};
use crate::measures::{dist2, EmpiricalMeasure};

pub const POTENTIAL_FAMILIES: &[&str] = &["quadratic", "gaussian"];
pub const TERMINAL_KINDS: &[&str] = &["variance", "potential", "target_attraction"];
pub const RUNNING_KINDS: &[&str] = &["control_energy", "tracking"];

/// Smooth scalar potentials `V : R^d -> R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Potential {
    /// `|x - c|^2`
    Quadratic { center: Vec<f64> },
    /// `exp(-|x - c|^2 / s^2)`
    Gaussian { center: Vec<f64>, width: f64 },
}

impl Potential {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Quadratic { center } => dist2(x, center),
            Potential::Gaussian { center, width } => (-dist2(x, center) / (width * width)).exp(),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Potential::Quadratic { center } => x.iter().zip(center).map(|(a, c)| 2.0 * (a - c)).collect(),
            Potential::Gaussian { center, width } => {
                let s2 = width * width;
                let g = (-dist2(x, center) / s2).exp();
                x.iter().zip(center).map(|(a, c)| -2.0 * (a - c) / s2 * g).collect()
            }
        }
    }

    fn dim(&self) -> usize {
        match self {
            Potential::Quadratic { center } | Potential::Gaussian { center, .. } => center.len(),
        }
    }
}

fn default_power() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalCost {
    /// `1/2 sum_i w_i |x_i - mean|^2`
    Variance,
    /// `(sum_i w_i V(x_i))^power`
    Potential {
        potential: Potential,
        #[serde(default = "default_power")]
        power: f64,
    },
    /// `sum_i w_i |x_i - target|^2`
    TargetAttraction { target: Vec<f64> },
}

impl TerminalCost {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |what: &str, got: usize| {
            Err(Error::InvalidArgument(format!("{what} has dimension {got}, expected {dim}")))
        };
        match self {
            TerminalCost::Variance => Ok(()),
            TerminalCost::Potential { potential, power } => {
                if potential.dim() != dim {
                    return bad("potential center", potential.dim());
                }
                if let Potential::Gaussian { width, .. } = potential {
                    if !(*width > 0.0) {
                        return Err(Error::InvalidArgument(format!("gaussian width {width} must be positive")));
                    }
                }
                if !(power.is_finite() && *power > 0.0) {
                    return Err(Error::InvalidArgument(format!("power {power} must be positive")));
                }
                Ok(())
            }
            TerminalCost::TargetAttraction { target } if target.len() != dim => bad("target", target.len()),
            TerminalCost::TargetAttraction { .. } => Ok(()),
        }
    }
}

/// `I^power` and its derivative, refusing the singular cases.
fn power_rule(integral: f64, power: f64) -> Result<(f64, f64)> {
    if power == 1.0 {
        return Ok((integral, 1.0));
    }
    let integer = power.fract() == 0.0;
    if (integral < 0.0 && !integer) || (integral == 0.0 && power < 1.0) {
        return Err(Error::PowerSingularity { integral, power });
    }
    if integer {
        let k = power as i32;
        Ok((integral.powi(k), power * integral.powi(k - 1)))
    } else {
        Ok((integral.powf(power), power * integral.powf(power - 1.0)))
    }
}

pub fn eval_terminal(cost: &TerminalCost, mu: &EmpiricalMeasure) -> Result<f64> {
    cost.validate(mu.dim())?;
    terminal_value_flat(cost, mu.points_flat(), mu.weights())
}

pub fn terminal_gradient(cost: &TerminalCost, mu: &EmpiricalMeasure) -> Result<Vec<Vec<f64>>> {
    cost.validate(mu.dim())?;
    let flat = terminal_gradient_flat(cost, mu.points_flat(), mu.weights())?;
    Ok(flat.chunks_exact(mu.dim()).map(<[f64]>::to_vec).collect())
}

fn weighted_mean(points: &[f64], weights: &[f64]) -> Vec<f64> {
    let d = points.len() / weights.len();
    let mut m = vec![0.0; d];
    for (x, w) in points.chunks_exact(d).zip(weights) {
        for (mi, xi) in m.iter_mut().zip(x) {
            *mi += w * xi;
        }
    }
    m
}

pub(crate) fn terminal_value_flat(cost: &TerminalCost, points: &[f64], weights: &[f64]) -> Result<f64> {
    let d = points.len() / weights.len();
    let pts = || points.chunks_exact(d).zip(weights);
    match cost {
        TerminalCost::Variance => {
            let m = weighted_mean(points, weights);
            Ok(0.5 * pts().map(|(x, w)| w * dist2(x, &m)).sum::<f64>())
        }
        TerminalCost::Potential { potential, power } => {
            let integral: f64 = pts().map(|(x, w)| w * potential.value(x)).sum();
            power_rule(integral, *power).map(|(v, _)| v)
        }
        TerminalCost::TargetAttraction { target } => Ok(pts().map(|(x, w)| w * dist2(x, target)).sum()),
    }
}

pub(crate) fn terminal_gradient_flat(cost: &TerminalCost, points: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let d = points.len() / weights.len();
    let mut out = Vec::with_capacity(points.len());
    match cost {
        TerminalCost::Variance => {
            let m = weighted_mean(points, weights);
            for x in points.chunks_exact(d) {
                out.extend(x.iter().zip(&m).map(|(a, b)| a - b));
            }
        }
        TerminalCost::Potential { potential, power } => {
            let integral: f64 = points
                .chunks_exact(d)
                .zip(weights)
                .map(|(x, w)| w * potential.value(x))
                .sum();
            let (_, slope) = power_rule(integral, *power)?;
            for x in points.chunks_exact(d) {
                out.extend(potential.gradient(x).into_iter().map(|g| slope * g));
            }
        }
        TerminalCost::TargetAttraction { target } => {
            for x in points.chunks_exact(d) {
                out.extend(x.iter().zip(target).map(|(a, c)| 2.0 * (a - c)));
            }
        }
    }
    Ok(out)
}

/// Running costs `L(mu, omega) = sum_i w_i l(x_i, omega(x_i))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunningCost {
    /// `l(x, v) = weight |v|^2`
    ControlEnergy { weight: f64 },
    /// `l(x, v) = weight |v|^2 + tracking_weight |x - target|^2`
    Tracking {
        weight: f64,
        tracking_weight: f64,
        target: Vec<f64>,
    },
}

impl RunningCost {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            RunningCost::Tracking { target, .. } if target.len() != dim => Err(Error::InvalidArgument(format!(
                "tracking target has dimension {}, expected {dim}",
                target.len()
            ))),
            _ => Ok(()),
        }
    }

    fn energy_weight(&self) -> f64 {
        match self {
            RunningCost::ControlEnergy { weight } | RunningCost::Tracking { weight, .. } => *weight,
        }
    }

    /// `l(x, v)`
    pub fn integrand(&self, x: &[f64], v: &[f64]) -> f64 {
        let energy = self.energy_weight() * v.iter().map(|a| a * a).sum::<f64>();
        match self {
            RunningCost::ControlEnergy { .. } => energy,
            RunningCost::Tracking {
                tracking_weight, target, ..
            } => energy + tracking_weight * dist2(x, target),
        }
    }

    /// `out += s * grad_x l(x, v)`
    pub(crate) fn grad_x_acc(&self, x: &[f64], s: f64, out: &mut [f64]) {
        if let RunningCost::Tracking {
            tracking_weight, target, ..
        } = self
        {
            for ((o, a), c) in out.iter_mut().zip(x).zip(target) {
                *o += s * 2.0 * tracking_weight * (a - c);
            }
        }
    }

    /// `grad_v l(x, v)`
    pub fn grad_v(&self, _x: &[f64], v: &[f64]) -> Vec<f64> {
        let lambda = self.energy_weight();
        v.iter().map(|a| 2.0 * lambda * a).collect()
    }
}

pub fn eval_running(cost: &RunningCost, mu: &EmpiricalMeasure, omega: &ControlField) -> f64 {
    running_value_flat(cost, mu.points_flat(), mu.weights(), omega)
}

pub fn running_gradient(cost: &RunningCost, mu: &EmpiricalMeasure, omega: &ControlField) -> Vec<Vec<f64>> {
    let flat = running_gradient_flat(cost, mu.points_flat(), mu.weights(), omega);
    flat.chunks_exact(mu.dim()).map(<[f64]>::to_vec).collect()
}

pub(crate) fn running_value_flat(cost: &RunningCost, points: &[f64], weights: &[f64], omega: &ControlField) -> f64 {
    let d = points.len() / weights.len();
    points
        .chunks_exact(d)
        .zip(weights)
        .map(|(x, w)| w * cost.integrand(x, &omega.eval(x)))
        .sum()
}

/// `grad_x l(x, omega(x)) + D omega(x)^T grad_v l(x, omega(x))` per particle.
pub(crate) fn running_gradient_flat(cost: &RunningCost, points: &[f64], weights: &[f64], omega: &ControlField) -> Vec<f64> {
    let d = points.len() / weights.len();
    let mut out = vec![0.0; points.len()];
    for (x, o) in points.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        cost.grad_x_acc(x, 1.0, o);
        let v = omega.eval(x);
        let gv = cost.grad_v(x, &v);
        let jac = omega.jacobian(x);
        crate::linalg::mat_t_vec_acc(&jac, &gv, 1.0, o);
    }
    out
}

/// `L` for an optional running cost (absent means zero).
pub(crate) fn running_or_zero(cost: Option<&RunningCost>, points: &[f64], weights: &[f64], omega: &ControlField) -> f64 {
    cost.map_or(0.0, |c| running_value_flat(c, points, weights, omega))
}
