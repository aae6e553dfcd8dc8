//! Needle variations of a control and the linearized transport of their
//! effect along a reference trajectory.

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    coupling_apply, local_jacobians, propagate, simulate_from, ControlField, ControlSignal, NonlocalField, Stage,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::functionals::{running_gradient_flat, running_or_zero, terminal_gradient_flat};
use crate::linalg::{dot, mat_vec_acc};
use crate::measures::EmpiricalMeasure;
use crate::problem::Problem;

/// Replace the control by `omega` on `[tau - epsilon, tau]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleParams {
    pub omega: ControlField,
    pub tau: f64,
    pub epsilon: f64,
}

/// Per-particle vectors on the grid `[tau, T]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationField {
    pub times: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    pub dim: usize,
}

impl PerturbationField {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.vectors[k]
    }

    pub fn terminal(&self) -> &[f64] {
        self.vectors.last().unwrap()
    }

    /// Vector of particle `i` at time index `k`.
    pub fn particle(&self, k: usize, i: usize) -> &[f64] {
        &self.vectors[k][i * self.dim..(i + 1) * self.dim]
    }

    pub fn max_abs(&self) -> f64 {
        self.vectors
            .iter()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn needle_control(u: &ControlSignal, params: &NeedleParams) -> Result<ControlSignal> {
    let NeedleParams { omega, tau, epsilon } = params;
    if omega.dim() != u.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            got: omega.dim(),
        });
    }
    if !(*epsilon >= 0.0) {
        return Err(Error::Needle(format!("epsilon = {epsilon} must be nonnegative")));
    }
    if !(*tau > 0.0 && *tau <= u.horizon()) {
        return Err(Error::Needle(format!("tau = {tau} outside (0, {}]", u.horizon())));
    }
    if *epsilon > *tau {
        return Err(Error::Needle(format!("epsilon = {epsilon} exceeds tau = {tau}")));
    }
    if *epsilon == 0.0 {
        return Ok(u.clone());
    }
    u.overwrite(tau - epsilon, *tau, omega)
}

fn node_of(traj: &Trajectory, tau: f64) -> Result<usize> {
    traj.index_of(tau)
        .ok_or_else(|| Error::Needle(format!("tau = {tau} is not a node of the time grid")))
}

/// `F_i(tau) = omega(x_i) - u(tau-)(x_i)` on the state at `tau`.
pub fn needle_initial(u: &ControlSignal, state: &EmpiricalMeasure, omega: &ControlField, tau: f64) -> Vec<f64> {
    let before = u.field_before(tau);
    let mut out = Vec::with_capacity(state.len() * state.dim());
    for x in state.points() {
        let (a, b) = (omega.eval(x), before.eval(x));
        out.extend(a.iter().zip(&b).map(|(p, q)| p - q));
    }
    out
}

/// Full linearization `y_i -> A_i y_i + sum_j w_j D_y H(x_i, x_j) y_j`.
fn tangent_rhs(field: &NonlocalField, coupled: bool) -> impl FnMut(&Stage<'_>, &[f64], &mut [f64]) + '_ {
    let mut jac = Vec::new();
    move |s, y, out| {
        let n = s.weights.len();
        let d = y.len() / n;
        jac.resize(n * d * d, 0.0);
        local_jacobians(field, s.control, s.t, s.points, s.weights, &mut jac);
        for ((a, yi), o) in jac.chunks_exact(d * d).zip(y.chunks_exact(d)).zip(out.chunks_exact_mut(d)) {
            mat_vec_acc(a, yi, 1.0, o);
        }
        if coupled {
            coupling_apply(&field.kernel, s.t, s.points, s.weights, y, out);
        }
    }
}

fn check_vectors(traj: &Trajectory, v: &[f64]) -> Result<()> {
    let expected = traj.particles() * traj.dim();
    if v.len() != expected {
        return Err(Error::DimensionMismatch { expected, got: v.len() });
    }
    Ok(())
}

/// First-order effect of a needle `(omega, tau)` along `traj` (epsilon is
/// ignored): the coupled linear system started from
/// `omega - u(tau-)` at `tau`.
pub fn needle_first_order(
    field: &NonlocalField,
    u: &ControlSignal,
    traj: &Trajectory,
    params: &NeedleParams,
) -> Result<PerturbationField> {
    let k = node_of(traj, params.tau)?;
    let f0 = needle_initial(u, &traj.states[k], &params.omega, params.tau);
    transport_tangent(field, u, traj, k, f0)
}

/// Solves the coupled tangent system from node `k` with initial data `f0`.
pub fn transport_tangent(
    field: &NonlocalField,
    u: &ControlSignal,
    traj: &Trajectory,
    k: usize,
    f0: Vec<f64>,
) -> Result<PerturbationField> {
    check_vectors(traj, &f0)?;
    let last = traj.len() - 1;
    let vectors = propagate(traj, u, k, last, f0, tangent_rhs(field, true));
    finite(PerturbationField {
        times: traj.times[k..].to_vec(),
        vectors,
        dim: traj.dim(),
    })
}

fn finite(p: PerturbationField) -> Result<PerturbationField> {
    for (k, v) in p.vectors.iter().enumerate() {
        if let Some(i) = v.iter().position(|a| !a.is_finite()) {
            return Err(Error::BlowUp {
                time: p.times[k],
                particle: i / p.dim,
                radius: f64::INFINITY,
                guard: f64::MAX,
            });
        }
    }
    Ok(p)
}

/// Derivative in `epsilon` of `t -> Phi_(tau,t)[(I + eps F0)_# mu_tau](x)`
/// at fixed `x = x_i(tau)`: the part of the flow variation caused by the
/// measure perturbation alone. Simulates the reference flow from `tau`.
pub fn flow_directional_derivative(
    field: &NonlocalField,
    u: &ControlSignal,
    mu_tau: &EmpiricalMeasure,
    f0: &[f64],
    tau: f64,
    horizon: f64,
    dt: f64,
) -> Result<PerturbationField> {
    let traj = simulate_from(field, u, mu_tau, tau, horizon, dt)?;
    flow_directional_derivative_on(field, u, &traj, f0)
}

/// As [`flow_directional_derivative`] on a trajectory that starts at `tau`.
///
/// Writes the coupled solution `F` (initial data `F0`) as `F = W F0 + w`,
/// `W` the frozen-measure Jacobian, so `w = F - W F0` solves the source
/// form `w' = A w + sum_j w_j D_y H (W_j F0_j + w_j)` with `w(tau) = 0`.
pub fn flow_directional_derivative_on(
    field: &NonlocalField,
    u: &ControlSignal,
    traj: &Trajectory,
    f0: &[f64],
) -> Result<PerturbationField> {
    check_vectors(traj, f0)?;
    let last = traj.len() - 1;
    let coupled = propagate(traj, u, 0, last, f0.to_vec(), tangent_rhs(field, true));
    let frozen = propagate(traj, u, 0, last, f0.to_vec(), tangent_rhs(field, false));
    let vectors = coupled
        .iter()
        .zip(&frozen)
        .map(|(c, f)| c.iter().zip(f).map(|(a, b)| a - b).collect())
        .collect();
    finite(PerturbationField {
        times: traj.times.clone(),
        vectors,
        dim: traj.dim(),
    })
}

/// Weighted pairing `sum_i w_i <a_i, b_i>`.
pub(crate) fn pairing(weights: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let d = a.len() / weights.len();
    weights
        .iter()
        .zip(a.chunks_exact(d).zip(b.chunks_exact(d)))
        .map(|(w, (x, y))| w * dot(x, y))
        .sum()
}

/// `int_tau^t sum_i w_i <grad L, F>` on the grid, trapezoid per step with
/// the step's control. Entry `m` holds the integral up to node `k + m`.
pub(crate) fn running_pairing_integral(problem: &Problem, u: &ControlSignal, traj: &Trajectory, k: usize, f: &PerturbationField) -> Vec<f64> {
    let mut acc = vec![0.0; f.len()];
    let Some(cost) = &problem.running else {
        return acc;
    };
    let w = traj.weights();
    for m in 0..f.len() - 1 {
        let (a, b) = (k + m, k + m + 1);
        let ctrl = u.field_at(0.5 * (traj.times[a] + traj.times[b]));
        let ga = running_gradient_flat(cost, traj.states[a].points_flat(), w, ctrl);
        let gb = running_gradient_flat(cost, traj.states[b].points_flat(), w, ctrl);
        let h = traj.times[b] - traj.times[a];
        acc[m + 1] = acc[m] + 0.5 * h * (pairing(w, &ga, f.at(m)) + pairing(w, &gb, f.at(m + 1)));
    }
    acc
}

/// `L(mu(tau), omega) - L(mu(tau), u(tau-))`.
pub(crate) fn running_gap(problem: &Problem, u: &ControlSignal, state: &EmpiricalMeasure, omega: &ControlField, tau: f64) -> f64 {
    let run = problem.running.as_ref();
    let (p, w) = (state.points_flat(), state.weights());
    running_or_zero(run, p, w, omega) - running_or_zero(run, p, w, u.field_before(tau))
}

/// Directional derivative of the total cost along the needle family:
/// `<grad phi, F_T> + [L(omega) - L(u(tau-))] + int_tau^T <grad L, F_t> dt`.
/// Nonnegative for every needle at an optimal control.
pub fn first_order_condition(
    problem: &Problem,
    u: &ControlSignal,
    traj: &Trajectory,
    params: &NeedleParams,
) -> Result<f64> {
    let k = node_of(traj, params.tau)?;
    let f = needle_first_order(&problem.field, u, traj, params)?;
    let terminal = traj.terminal();
    let gphi = terminal_gradient_flat(&problem.terminal, terminal.points_flat(), terminal.weights())?;
    let end = pairing(traj.weights(), &gphi, f.terminal());
    let integral = *running_pairing_integral(problem, u, traj, k, &f).last().unwrap();
    let gap = running_gap(problem, u, &traj.states[k], &params.omega, params.tau);
    Ok(end + gap + integral)
}
