//! Forward-backward extremal system: costate cloud, Hamiltonian,
//! K-function and the maximization and stationarity checks.

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    coupling_apply_adjoint, local_jacobians, propagate, velocities, ControlField, ControlSignal, NonlocalField, Stage,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::functionals::{running_gradient_flat, running_or_zero, terminal_gradient_flat, RunningCost, TerminalCost};
use crate::linalg::mat_t_vec_acc;
use crate::measures::EmpiricalMeasure;
use crate::problem::Problem;
use crate::variations::{needle_first_order, pairing, running_gap, running_pairing_integral, NeedleParams};

/// One point of the phase-space cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseParticle {
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub weight: f64,
}

/// `nu(t) = sum_i w_i delta_(x_i(t), r_i(t))` on the trajectory grid. The
/// x-cloud is a copy of the forward states, never re-integrated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostateCloud {
    pub times: Vec<f64>,
    pub states: Vec<EmpiricalMeasure>,
    costates: Vec<Vec<f64>>,
}

impl CostateCloud {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    /// Flat `r` at time index `k`.
    pub fn costate(&self, k: usize) -> &[f64] {
        &self.costates[k]
    }

    pub fn first_marginal(&self, k: usize) -> &EmpiricalMeasure {
        &self.states[k]
    }

    pub fn phase_particles(&self, k: usize) -> Vec<PhaseParticle> {
        let d = self.dim();
        self.states[k]
            .points()
            .zip(self.costates[k].chunks_exact(d))
            .zip(self.states[k].weights())
            .map(|((x, r), &weight)| PhaseParticle {
                x: x.to_vec(),
                r: r.to_vec(),
                weight,
            })
            .collect()
    }
}

/// `r_i(T) = -grad phi(x_i(T))`, flattened.
pub fn terminal_costate(mu_t: &EmpiricalMeasure, cost: &TerminalCost) -> Result<Vec<f64>> {
    cost.validate(mu_t.dim())?;
    let mut r = terminal_gradient_flat(cost, mu_t.points_flat(), mu_t.weights())?;
    for v in &mut r {
        *v = -*v;
    }
    Ok(r)
}

/// Integrates `r_i' = grad L(x_i) - A_i^T r_i - sum_j w_j D_y H(x_j, x_i)^T r_j`
/// backwards from `terminal` along the stored states.
pub fn costate_backward(
    field: &NonlocalField,
    running: Option<&RunningCost>,
    traj: &Trajectory,
    u: &ControlSignal,
    terminal: Vec<f64>,
) -> Result<CostateCloud> {
    let expected = traj.particles() * traj.dim();
    if terminal.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: terminal.len(),
        });
    }
    let mut jac = Vec::new();
    let rhs = |s: &Stage<'_>, r: &[f64], out: &mut [f64]| {
        let n = s.weights.len();
        let d = r.len() / n;
        jac.resize(n * d * d, 0.0);
        local_jacobians(field, s.control, s.t, s.points, s.weights, &mut jac);
        for ((a, ri), o) in jac.chunks_exact(d * d).zip(r.chunks_exact(d)).zip(out.chunks_exact_mut(d)) {
            mat_t_vec_acc(a, ri, -1.0, o);
        }
        let mut adj = vec![0.0; r.len()];
        coupling_apply_adjoint(&field.kernel, s.t, s.points, s.weights, r, &mut adj);
        for (o, a) in out.iter_mut().zip(&adj) {
            *o -= a;
        }
        if let Some(cost) = running {
            let g = running_gradient_flat(cost, s.points, s.weights, s.control);
            for (o, a) in out.iter_mut().zip(&g) {
                *o += a;
            }
        }
    };
    let last = traj.len() - 1;
    let costates = propagate(traj, u, last, 0, terminal, rhs);
    let d = traj.dim();
    for (k, r) in costates.iter().enumerate() {
        if let Some(i) = r.iter().position(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                time: traj.times[k],
                particle: i / d,
                radius: f64::INFINITY,
                guard: f64::MAX,
            });
        }
    }
    Ok(CostateCloud {
        times: traj.times.clone(),
        states: traj.states.clone(),
        costates,
    })
}

/// `H = sum_i w_i <r_i, v[mu](t, x_i) + omega(x_i)> - L(mu, omega)`.
pub fn hamiltonian(
    state: &EmpiricalMeasure,
    r: &[f64],
    field: &NonlocalField,
    running: Option<&RunningCost>,
    omega: &ControlField,
    t: f64,
) -> f64 {
    let (p, w) = (state.points_flat(), state.weights());
    let mut v = vec![0.0; p.len()];
    velocities(field, omega, t, p, w, &mut v);
    pairing(w, r, &v) - running_or_zero(running, p, w, omega)
}

/// `d H / d theta_k` for the parameters of `omega`, analytically.
pub(crate) fn hamiltonian_param_gradient(
    state: &EmpiricalMeasure,
    r: &[f64],
    running: Option<&RunningCost>,
    omega: &ControlField,
) -> Vec<f64> {
    let d = state.dim();
    let mut grad = vec![0.0; omega.num_params()];
    for ((x, ri), w) in state.points().zip(r.chunks_exact(d)).zip(state.weights()) {
        let mut dir = ri.to_vec();
        if let Some(cost) = running {
            let gv = cost.grad_v(x, &omega.eval(x));
            for (a, b) in dir.iter_mut().zip(&gv) {
                *a -= b;
            }
        }
        for (k, g) in grad.iter_mut().enumerate() {
            let dk = omega.param_derivative(k, x);
            *g += w * dir.iter().zip(&dk).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    grad
}

/// Control, forward states and costate of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Extremal {
    pub control: ControlSignal,
    pub trajectory: Trajectory,
    pub costate: CostateCloud,
}

impl Extremal {
    pub fn hamiltonian_at(&self, problem: &Problem, k: usize, omega: &ControlField) -> f64 {
        hamiltonian(
            &self.trajectory.states[k],
            self.costate.costate(k),
            &problem.field,
            problem.running.as_ref(),
            omega,
            self.trajectory.times[k],
        )
    }

    /// `t -> H(t, nu(t), u(t))` with the right-continuous control.
    pub fn hamiltonian_series(&self, problem: &Problem) -> Vec<f64> {
        (0..self.trajectory.len())
            .map(|k| {
                let t = self.trajectory.times[k];
                self.hamiltonian_at(problem, k, self.control.field_at(t))
            })
            .collect()
    }

    fn node(&self, t: f64) -> Result<usize> {
        self.trajectory
            .index_of(t)
            .ok_or_else(|| Error::TimeGrid(format!("t = {t} is not a node of the time grid")))
    }
}

/// Simulates `u` forward and solves the costate backward.
pub fn extremal(problem: &Problem, u: &ControlSignal) -> Result<Extremal> {
    problem.validate()?;
    let trajectory = problem.simulate(u)?;
    let terminal = terminal_costate(trajectory.terminal(), &problem.terminal)?;
    let costate = costate_backward(&problem.field, problem.running.as_ref(), &trajectory, u, terminal)?;
    Ok(Extremal {
        control: u.clone(),
        trajectory,
        costate,
    })
}

/// Values of `K_(omega, tau)` on the grid `[tau, T]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KFunction {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl KFunction {
    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// `max_t |K(t) - K(T)|`
    pub fn max_deviation(&self) -> f64 {
        let end = self.terminal();
        self.values.iter().fold(0.0, |m, v| m.max((v - end).abs()))
    }

    /// Population standard deviation over the grid.
    pub fn std_dev(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        (self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

/// `K(t) = sum_i w_i <r_i(t), F_t(x_i)> - int_tau^t <grad L, F> + [L(u(tau-)) - L(omega)]`.
pub fn k_function(problem: &Problem, ext: &Extremal, params: &NeedleParams) -> Result<KFunction> {
    let traj = &ext.trajectory;
    let k = ext.node(params.tau).map_err(|e| Error::Needle(e.to_string()))?;
    let f = needle_first_order(&problem.field, &ext.control, traj, params)?;
    let integral = running_pairing_integral(problem, &ext.control, traj, k, &f);
    let bracket = -running_gap(problem, &ext.control, &traj.states[k], &params.omega, params.tau);
    let w = traj.weights();
    let values = (0..f.len())
        .map(|m| pairing(w, ext.costate.costate(k + m), f.at(m)) - integral[m] + bracket)
        .collect();
    Ok(KFunction {
        times: f.times,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaximizationViolation {
    pub time: f64,
    pub candidate: usize,
    /// `H(u*) - H(candidate)`, negative beyond `-tolerance`.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaximizationEntry {
    pub time: f64,
    pub hamiltonian: f64,
    pub best_candidate: f64,
    pub margin: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaximizationReport {
    pub entries: Vec<MaximizationEntry>,
    pub violations: Vec<MaximizationViolation>,
}

impl MaximizationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn worst_margin(&self) -> f64 {
        self.entries.iter().map(|e| e.margin).fold(f64::INFINITY, f64::min)
    }
}

/// `H(t, nu(t), u(t)) >= H(t, nu(t), omega) - rel_tol (1 + |H|)` for every
/// candidate and sampled grid time.
pub fn maximization_check(
    problem: &Problem,
    ext: &Extremal,
    candidates: &[ControlField],
    times: &[f64],
    rel_tol: f64,
) -> Result<MaximizationReport> {
    let mut entries = Vec::with_capacity(times.len());
    let mut violations = Vec::new();
    for &t in times {
        let k = ext.node(t)?;
        let h = ext.hamiltonian_at(problem, k, ext.control.field_at(t));
        let tolerance = rel_tol * (1.0 + h.abs());
        let mut best = f64::NEG_INFINITY;
        for (c, omega) in candidates.iter().enumerate() {
            let hc = ext.hamiltonian_at(problem, k, omega);
            best = best.max(hc);
            if h - hc < -tolerance {
                violations.push(MaximizationViolation {
                    time: t,
                    candidate: c,
                    margin: h - hc,
                });
            }
        }
        entries.push(MaximizationEntry {
            time: t,
            hamiltonian: h,
            best_candidate: best,
            margin: h - best,
            tolerance,
        });
    }
    Ok(MaximizationReport { entries, violations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityEntry {
    pub time: f64,
    pub hamiltonian: f64,
    /// Central-difference `d H / d theta_k` for each parameter.
    pub derivatives: Vec<f64>,
    pub tolerance: f64,
    /// Set when `u(t)` lies on the boundary of the control ball.
    pub skipped: bool,
}

impl StationarityEntry {
    pub fn max_abs(&self) -> f64 {
        self.derivatives.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn passed(&self) -> bool {
        self.skipped || self.max_abs() <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub entries: Vec<StationarityEntry>,
}

impl StationarityReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(StationarityEntry::passed)
    }

    pub fn skipped(&self) -> usize {
        self.entries.iter().filter(|e| e.skipped).count()
    }
}

/// Relative step of the central differences in [`stationarity_check`].
const STATIONARITY_STEP: f64 = 1e-5;

/// Directional derivatives of `omega -> H(t, nu(t), omega)` at `u(t)` along
/// every parameter, by central differences.
pub fn stationarity_check(problem: &Problem, ext: &Extremal, times: &[f64], rel_tol: f64) -> Result<StationarityReport> {
    let radius = problem.working_radius();
    let mut entries = Vec::with_capacity(times.len());
    for &t in times {
        let k = ext.node(t)?;
        let omega = ext.control.field_at(t);
        let h = ext.hamiltonian_at(problem, k, omega);
        let skipped = omega.c1_norm(radius) >= problem.controls.bound * (1.0 - 1e-9);
        let theta = omega.params();
        let derivatives = (0..theta.len())
            .map(|i| {
                let step = STATIONARITY_STEP * (1.0 + theta[i].abs());
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                plus[i] += step;
                minus[i] -= step;
                let hp = ext.hamiltonian_at(problem, k, &omega.with_params(&plus));
                let hm = ext.hamiltonian_at(problem, k, &omega.with_params(&minus));
                (hp - hm) / (2.0 * step)
            })
            .collect();
        entries.push(StationarityEntry {
            time: t,
            hamiltonian: h,
            derivatives,
            tolerance: rel_tol * (1.0 + h.abs()),
            skipped,
        });
    }
    Ok(StationarityReport { entries })
}

/// Largest candidate grid before falling back to coordinate axes.
const MAX_TENSOR_CANDIDATES: usize = 4096;

/// Tensor grid of `levels` values per parameter over the box of
/// single-parameter extents of the control ball, kept when inside the ball.
/// Large parameter counts use the coordinate axes instead of the full
/// tensor product.
pub fn default_candidates(problem: &Problem, levels: usize) -> Vec<ControlField> {
    let template = &problem.controls.template;
    let p = template.num_params();
    let bound = problem.controls.bound;
    let radius = problem.working_radius();
    let extents: Vec<f64> = (0..p)
        .map(|i| {
            let mut e = vec![0.0; p];
            e[i] = 1.0;
            let unit = template.with_params(&e).c1_norm(radius);
            if unit > 0.0 { bound / unit } else { 0.0 }
        })
        .collect();
    let values: Vec<f64> = if levels <= 1 {
        vec![0.0]
    } else {
        (0..levels).map(|i| -1.0 + 2.0 * i as f64 / (levels - 1) as f64).collect()
    };
    let feasible = |theta: &[f64]| {
        let f = template.with_params(theta);
        (f.c1_norm(radius) <= bound).then_some(f)
    };
    let total = (values.len() as f64).powi(p as i32);
    if total <= MAX_TENSOR_CANDIDATES as f64 {
        let mut out = Vec::new();
        let mut idx = vec![0usize; p];
        loop {
            let theta: Vec<f64> = idx.iter().zip(&extents).map(|(&i, e)| values[i] * e).collect();
            out.extend(feasible(&theta));
            let mut j = 0;
            while j < p {
                idx[j] += 1;
                if idx[j] < values.len() {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
            if j == p {
                break;
            }
        }
        out
    } else {
        let mut out = Vec::new();
        for i in 0..p {
            for &v in &values {
                let mut theta = vec![0.0; p];
                theta[i] = v * extents[i];
                out.extend(feasible(&theta));
            }
        }
        out
    }
}

/// Midpoints of the control intervals, snapped to the time grid.
pub fn interval_midpoints(problem: &Problem) -> Vec<f64> {
    let grid = problem.zero_control().grid().to_vec();
    let dt = problem.dt;
    grid.windows(2)
        .map(|w| (0.5 * (w[0] + w[1]) / dt).round() * dt)
        .collect()
}
