//! Particle integration of the controlled non-local continuity equation.
//!
//! Every particle moves with `v[mu_n(t)](t, x_i) + u(t, x_i)` where `mu_n` is
//! the moving empirical measure, re-evaluated at each RK4 stage. The same
//! stepping drives the linearized systems of the first-order machinery, which
//! read stored states at the nodes and cubic Hermite reconstructions at the
//! half steps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::control::{ControlField, ControlSignal};
use super::field::{Kernel, NonlocalField};
use crate::error::{Error, Result};
use crate::linalg::{mat_t_vec_acc, mat_vec_acc, Matrix};
use crate::measures::{norm, EmpiricalMeasure};
use crate::transport::wasserstein_distance;

/// Particle counts from which per-particle loops go parallel.
const PAR_THRESHOLD: usize = 256;
/// Blow-up guard, as a multiple of the Gronwall support radius.
const BLOW_UP_FACTOR: f64 = 1e3;

/// States of a particle flow on a uniform time grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<EmpiricalMeasure>,
    /// Hermite reconstruction of the positions at each step midpoint.
    midpoints: Vec<Vec<f64>>,
    /// Per time, per particle `D_x Phi_(t0, t)` when requested.
    pub jacobians: Option<Vec<Vec<Matrix>>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    pub fn particles(&self) -> usize {
        self.states[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        self.states[0].weights()
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn initial(&self) -> &EmpiricalMeasure {
        &self.states[0]
    }

    pub fn terminal(&self) -> &EmpiricalMeasure {
        self.states.last().unwrap()
    }

    pub fn midpoint(&self, step: usize) -> &[f64] {
        &self.midpoints[step]
    }

    /// Node index of time `t`, if `t` lies on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let t0 = self.times[0];
        let k = ((t - t0) / self.dt()).round();
        if k < 0.0 || k as usize >= self.times.len() {
            return None;
        }
        let k = k as usize;
        ((self.times[k] - t).abs() <= 1e-9 * self.dt()).then_some(k)
    }

    /// Trajectory restricted to nodes `from..`.
    pub fn tail(&self, from: usize) -> Trajectory {
        Trajectory {
            times: self.times[from..].to_vec(),
            states: self.states[from..].to_vec(),
            midpoints: self.midpoints[from..].to_vec(),
            jacobians: None,
        }
    }
}

/// Builds `t0, t0 + dt, ..., t1`, checking that `dt` divides the horizon and
/// every control switch inside it.
pub(crate) fn time_grid(t0: f64, t1: f64, dt: f64, control: &ControlSignal) -> Result<Vec<f64>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::TimeGrid(format!("step dt = {dt} must be positive")));
    }
    if !(t1 > t0) {
        return Err(Error::TimeGrid(format!("empty time interval [{t0}, {t1}]")));
    }
    let span = (t1 - t0) / dt;
    let steps = span.round();
    if (span - steps).abs() > 1e-6 || steps < 1.0 {
        return Err(Error::TimeGrid(format!("dt = {dt} does not divide [{t0}, {t1}]")));
    }
    for &s in control.grid() {
        if s > t0 && s < t1 {
            let q = (s - t0) / dt;
            if (q - q.round()).abs() > 1e-6 {
                return Err(Error::TimeGrid(format!(
                    "dt = {dt} does not divide the control switch at t = {s}"
                )));
            }
        }
    }
    let steps = steps as usize;
    let mut times: Vec<f64> = (0..=steps).map(|k| t0 + k as f64 * dt).collect();
    times[steps] = t1;
    Ok(times)
}

/// Velocities of all particles under `v[mu] + omega`, `mu` the cloud itself.
pub(crate) fn velocities(
    field: &NonlocalField,
    control: &ControlField,
    t: f64,
    points: &[f64],
    weights: &[f64],
    out: &mut [f64],
) {
    let d = points.len() / weights.len();
    out.fill(0.0);
    if let Kernel::LinearAttraction { strength } = field.kernel {
        let mut mean = vec![0.0; d];
        for (x, &w) in points.chunks_exact(d).zip(weights) {
            for (m, xi) in mean.iter_mut().zip(x) {
                *m += w * xi;
            }
        }
        for (o, x) in out.chunks_exact_mut(d).zip(points.chunks_exact(d)) {
            for ((oi, xi), mi) in o.iter_mut().zip(x).zip(&mean) {
                *oi = strength * (mi - xi);
            }
        }
        let local = NonlocalField::new(Kernel::Zero, field.drift.clone());
        for (o, x) in out.chunks_exact_mut(d).zip(points.chunks_exact(d)) {
            local.accumulate_velocity(t, points, weights, x, o);
            control.accumulate(x, o);
        }
        return;
    }
    let per_particle = |(o, x): (&mut [f64], &[f64])| {
        field.accumulate_velocity(t, points, weights, x, o);
        control.accumulate(x, o);
    };
    if weights.len() >= PAR_THRESHOLD {
        out.par_chunks_mut(d).zip(points.par_chunks(d)).for_each(per_particle);
    } else {
        out.chunks_exact_mut(d).zip(points.chunks_exact(d)).for_each(per_particle);
    }
}

/// `D_x (v[mu] + omega)` at every particle, row-major `d x d` blocks.
pub(crate) fn local_jacobians(
    field: &NonlocalField,
    control: &ControlField,
    t: f64,
    points: &[f64],
    weights: &[f64],
    out: &mut [f64],
) {
    let d = points.len() / weights.len();
    out.fill(0.0);
    let per_particle = |(o, x): (&mut [f64], &[f64])| {
        field.accumulate_jacobian_x(t, points, weights, x, o);
        control.accumulate_jacobian(x, o);
    };
    if weights.len() >= PAR_THRESHOLD {
        out.par_chunks_mut(d * d).zip(points.par_chunks(d)).for_each(per_particle);
    } else {
        out.chunks_exact_mut(d * d).zip(points.chunks_exact(d)).for_each(per_particle);
    }
}

/// `out_i += sum_j w_j D_y H(t, x_i, x_j) y_j`.
pub(crate) fn coupling_apply(kernel: &Kernel, t: f64, points: &[f64], weights: &[f64], y: &[f64], out: &mut [f64]) {
    let d = points.len() / weights.len();
    match kernel {
        Kernel::Zero => {}
        Kernel::LinearAttraction { strength } => {
            let mut avg = vec![0.0; d];
            for (yj, &w) in y.chunks_exact(d).zip(weights) {
                for (a, v) in avg.iter_mut().zip(yj) {
                    *a += w * v;
                }
            }
            for o in out.chunks_exact_mut(d) {
                for (oi, a) in o.iter_mut().zip(&avg) {
                    *oi += strength * a;
                }
            }
        }
        _ => {
            let per_particle = |(o, xi): (&mut [f64], &[f64])| {
                let mut block = vec![0.0; d * d];
                for ((xj, yj), &w) in points.chunks_exact(d).zip(y.chunks_exact(d)).zip(weights) {
                    block.fill(0.0);
                    kernel.accumulate_jacobian_y(t, xi, xj, 1.0, &mut block);
                    mat_vec_acc(&block, yj, w, o);
                }
            };
            if weights.len() >= PAR_THRESHOLD {
                out.par_chunks_mut(d).zip(points.par_chunks(d)).for_each(per_particle);
            } else {
                out.chunks_exact_mut(d).zip(points.chunks_exact(d)).for_each(per_particle);
            }
        }
    }
}

/// `out_i += sum_j w_j D_y H(t, x_j, x_i)^T r_j`.
pub(crate) fn coupling_apply_adjoint(
    kernel: &Kernel,
    t: f64,
    points: &[f64],
    weights: &[f64],
    r: &[f64],
    out: &mut [f64],
) {
    let d = points.len() / weights.len();
    match kernel {
        Kernel::LinearAttraction { .. } | Kernel::Zero => {
            // D_y H is a scalar multiple of the identity: same as the forward map.
            coupling_apply(kernel, t, points, weights, r, out);
        }
        _ => {
            let per_particle = |(o, xi): (&mut [f64], &[f64])| {
                let mut block = vec![0.0; d * d];
                for ((xj, rj), &w) in points.chunks_exact(d).zip(r.chunks_exact(d)).zip(weights) {
                    block.fill(0.0);
                    kernel.accumulate_jacobian_y(t, xj, xi, 1.0, &mut block);
                    mat_t_vec_acc(&block, rj, w, o);
                }
            };
            if weights.len() >= PAR_THRESHOLD {
                out.par_chunks_mut(d).zip(points.par_chunks(d)).for_each(per_particle);
            } else {
                out.chunks_exact_mut(d).zip(points.chunks_exact(d)).for_each(per_particle);
            }
        }
    }
}

/// `(R0 + 1) exp((M + G) T) - ` the Gronwall radius containing the support
/// on `[0, T]`, with `G` the largest control growth constant.
pub fn support_bound(field: &NonlocalField, u: &ControlSignal, mu0: &EmpiricalMeasure, horizon: f64) -> f64 {
    let growth = u.fields().iter().map(ControlField::growth_constant).fold(0.0, f64::max);
    gronwall_radius(mu0.support_radius(), field.lipschitz_bounds().m + growth, horizon)
}

pub fn gronwall_radius(r0: f64, rate: f64, horizon: f64) -> f64 {
    (r0 + 1.0) * (rate * horizon).exp()
}

fn check_inputs(field: &NonlocalField, u: &ControlSignal, mu0: &EmpiricalMeasure) -> Result<()> {
    if u.dim() != mu0.dim() {
        return Err(Error::DimensionMismatch { expected: mu0.dim(), got: u.dim() });
    }
    if !field.check_dim(mu0.dim()) {
        return Err(Error::InvalidArgument(format!("drift does not act on R^{}", mu0.dim())));
    }
    Ok(())
}

fn guard(points: &[f64], d: usize, limit: f64, time: f64) -> Result<()> {
    for (i, x) in points.chunks_exact(d).enumerate() {
        let r = norm(x);
        if !r.is_finite() || r > limit {
            return Err(Error::BlowUp {
                time,
                particle: i,
                radius: r,
                guard: limit,
            });
        }
    }
    Ok(())
}

/// Forward flow from `t = 0`.
pub fn simulate(
    field: &NonlocalField,
    u: &ControlSignal,
    mu0: &EmpiricalMeasure,
    horizon: f64,
    dt: f64,
) -> Result<Trajectory> {
    integrate(field, u, mu0, 0.0, horizon, dt, false)
}

/// Forward flow on `[t0, t1]` starting from `mu0` at `t0`.
pub fn simulate_from(
    field: &NonlocalField,
    u: &ControlSignal,
    mu0: &EmpiricalMeasure,
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Trajectory> {
    integrate(field, u, mu0, t0, t1, dt, false)
}

/// Forward flow together with the frozen-measure Jacobians
/// `dW_i/dt = D_x(v[mu(t)] + u)(t, x_i(t)) W_i`, `W_i(0) = I`.
pub fn jacobian_flow(
    field: &NonlocalField,
    u: &ControlSignal,
    mu0: &EmpiricalMeasure,
    horizon: f64,
    dt: f64,
) -> Result<Trajectory> {
    integrate(field, u, mu0, 0.0, horizon, dt, true)
}

fn integrate(
    field: &NonlocalField,
    u: &ControlSignal,
    mu0: &EmpiricalMeasure,
    t0: f64,
    t1: f64,
    dt: f64,
    with_jacobians: bool,
) -> Result<Trajectory> {
    check_inputs(field, u, mu0)?;
    let times = time_grid(t0, t1, dt, u)?;
    let (n, d) = (mu0.len(), mu0.dim());
    let weights = mu0.weights();
    let limit = BLOW_UP_FACTOR * support_bound(field, u, mu0, t1);
    let dd = d * d;

    let mut x = mu0.points_flat().to_vec();
    let mut jac: Vec<f64> = if with_jacobians {
        (0..n).flat_map(|_| Matrix::identity(d).into_vec()).collect()
    } else {
        Vec::new()
    };

    let mut states = Vec::with_capacity(times.len());
    let mut jacobians = Vec::new();
    let mut midpoints = Vec::with_capacity(times.len() - 1);
    states.push(mu0.clone());
    if with_jacobians {
        jacobians.push(split_matrices(&jac, d));
    }

    let len = n * d;
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    let mut stage = vec![0.0; len];
    let mut v_end = vec![0.0; len];
    let (mut a1, mut a2, mut a3, mut a4) = (vec![0.0; n * dd], vec![0.0; n * dd], vec![0.0; n * dd], vec![0.0; n * dd]);
    let (mut j1, mut j2, mut j3, mut j4) = (vec![0.0; n * dd], vec![0.0; n * dd], vec![0.0; n * dd], vec![0.0; n * dd]);
    let mut jstage = vec![0.0; n * dd];

    for step in 0..times.len() - 1 {
        let (ta, tb) = (times[step], times[step + 1]);
        let h = tb - ta;
        let tm = ta + 0.5 * h;
        let ctrl = u.field_at(tm);

        velocities(field, ctrl, ta, &x, weights, &mut k1);
        if with_jacobians {
            local_jacobians(field, ctrl, ta, &x, weights, &mut a1);
            matmul_blocks(&a1, &jac, d, &mut j1);
        }
        axpy_into(&x, 0.5 * h, &k1, &mut stage);
        if with_jacobians {
            axpy_into(&jac, 0.5 * h, &j1, &mut jstage);
        }
        velocities(field, ctrl, tm, &stage, weights, &mut k2);
        if with_jacobians {
            local_jacobians(field, ctrl, tm, &stage, weights, &mut a2);
            matmul_blocks(&a2, &jstage, d, &mut j2);
        }
        axpy_into(&x, 0.5 * h, &k2, &mut stage);
        if with_jacobians {
            axpy_into(&jac, 0.5 * h, &j2, &mut jstage);
        }
        velocities(field, ctrl, tm, &stage, weights, &mut k3);
        if with_jacobians {
            local_jacobians(field, ctrl, tm, &stage, weights, &mut a3);
            matmul_blocks(&a3, &jstage, d, &mut j3);
        }
        axpy_into(&x, h, &k3, &mut stage);
        if with_jacobians {
            axpy_into(&jac, h, &j3, &mut jstage);
        }
        velocities(field, ctrl, tb, &stage, weights, &mut k4);
        if with_jacobians {
            local_jacobians(field, ctrl, tb, &stage, weights, &mut a4);
            matmul_blocks(&a4, &jstage, d, &mut j4);
        }

        let x_start = x.clone();
        for i in 0..len {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if with_jacobians {
            for i in 0..n * dd {
                jac[i] += h / 6.0 * (j1[i] + 2.0 * j2[i] + 2.0 * j3[i] + j4[i]);
            }
        }
        guard(&x, d, limit, tb)?;

        // Cubic Hermite midpoint from end-point velocities under this step's control.
        velocities(field, ctrl, tb, &x, weights, &mut v_end);
        let mid: Vec<f64> = (0..len)
            .map(|i| 0.5 * (x_start[i] + x[i]) + h / 8.0 * (k1[i] - v_end[i]))
            .collect();
        midpoints.push(mid);
        states.push(mu0.with_points(x.clone()));
        if with_jacobians {
            jacobians.push(split_matrices(&jac, d));
        }
    }

    Ok(Trajectory {
        times,
        states,
        midpoints,
        jacobians: with_jacobians.then_some(jacobians),
    })
}

fn axpy_into(base: &[f64], s: f64, dir: &[f64], out: &mut [f64]) {
    for ((o, b), v) in out.iter_mut().zip(base).zip(dir) {
        *o = b + s * v;
    }
}

fn matmul_blocks(a: &[f64], b: &[f64], d: usize, out: &mut [f64]) {
    let dd = d * d;
    for ((ab, bb), ob) in a.chunks_exact(dd).zip(b.chunks_exact(dd)).zip(out.chunks_exact_mut(dd)) {
        for i in 0..d {
            for j in 0..d {
                ob[i * d + j] = (0..d).map(|k| ab[i * d + k] * bb[k * d + j]).sum();
            }
        }
    }
}

fn split_matrices(flat: &[f64], d: usize) -> Vec<Matrix> {
    flat.chunks_exact(d * d)
        .map(|c| Matrix::from_row_major(d, c.to_vec()))
        .collect()
}

/// State available to a right-hand side at one RK4 stage.
pub(crate) struct Stage<'a> {
    pub t: f64,
    pub points: &'a [f64],
    pub weights: &'a [f64],
    pub control: &'a ControlField,
}

/// RK4 for `y' = rhs(stage, y)` on the stored grid of `traj`, from node
/// `from` to node `to` (backwards when `to < from`). The returned values are
/// indexed by node, `min(from, to)..=max(from, to)`, in increasing time.
pub(crate) fn propagate<F>(
    traj: &Trajectory,
    u: &ControlSignal,
    from: usize,
    to: usize,
    init: Vec<f64>,
    mut rhs: F,
) -> Vec<Vec<f64>>
where
    F: FnMut(&Stage<'_>, &[f64], &mut [f64]),
{
    let len = init.len();
    let weights = traj.weights();
    let forward = to >= from;
    let count = from.abs_diff(to) + 1;
    let mut values = Vec::with_capacity(count);
    let mut y = init;
    values.push(y.clone());
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    let mut tmp = vec![0.0; len];

    let mut node = from;
    while node != to {
        let (next, step) = if forward { (node + 1, node) } else { (node - 1, node - 1) };
        let (ta, tb) = (traj.times[node], traj.times[next]);
        let h = tb - ta;
        let tm = 0.5 * (ta + tb);
        let ctrl = u.field_at(0.5 * (traj.times[step] + traj.times[step + 1]));
        let start = Stage {
            t: ta,
            points: traj.states[node].points_flat(),
            weights,
            control: ctrl,
        };
        let mid = Stage {
            t: tm,
            points: traj.midpoint(step),
            weights,
            control: ctrl,
        };
        let end = Stage {
            t: tb,
            points: traj.states[next].points_flat(),
            weights,
            control: ctrl,
        };

        eval(&mut rhs, &start, &y, &mut k1);
        axpy_into(&y, 0.5 * h, &k1, &mut tmp);
        eval(&mut rhs, &mid, &tmp, &mut k2);
        axpy_into(&y, 0.5 * h, &k2, &mut tmp);
        eval(&mut rhs, &mid, &tmp, &mut k3);
        axpy_into(&y, h, &k3, &mut tmp);
        eval(&mut rhs, &end, &tmp, &mut k4);
        for i in 0..len {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        values.push(y.clone());
        node = next;
    }
    if !forward {
        values.reverse();
    }
    values
}

fn eval<F>(rhs: &mut F, stage: &Stage<'_>, y: &[f64], out: &mut [f64])
where
    F: FnMut(&Stage<'_>, &[f64], &mut [f64]),
{
    out.fill(0.0);
    rhs(stage, y, out);
}

/// `t -> W1(mu(t), nu(t)) / W1(mu0, nu0)` against the Gronwall envelope
/// `exp((L1 + Lip(u) + 2 L2) t)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractivityCurve {
    pub times: Vec<f64>,
    pub ratios: Vec<f64>,
    pub envelope: Vec<f64>,
}

impl ContractivityCurve {
    /// Largest `ratio / envelope` over the grid.
    pub fn worst_excess(&self) -> f64 {
        self.ratios
            .iter()
            .zip(&self.envelope)
            .map(|(r, e)| r / e)
            .fold(0.0, f64::max)
    }
}

pub fn contractivity_check(
    field: &NonlocalField,
    u: &ControlSignal,
    mu0: &EmpiricalMeasure,
    nu0: &EmpiricalMeasure,
    horizon: f64,
    dt: f64,
) -> Result<ContractivityCurve> {
    let base = wasserstein_distance(1, mu0, nu0)?;
    if base == 0.0 {
        return Err(Error::CoincidentMeasures);
    }
    let a = simulate(field, u, mu0, horizon, dt)?;
    let b = simulate(field, u, nu0, horizon, dt)?;
    let bounds = field.lipschitz_bounds();
    let lip_u = u.fields().iter().map(ControlField::lipschitz_bound).fold(0.0, f64::max);
    let rate = bounds.l1 + lip_u + 2.0 * bounds.l2;
    let mut ratios = Vec::with_capacity(a.len());
    let mut envelope = Vec::with_capacity(a.len());
    for (k, &t) in a.times.iter().enumerate() {
        ratios.push(wasserstein_distance(1, &a.states[k], &b.states[k])? / base);
        envelope.push((rate * t).exp());
    }
    Ok(ContractivityCurve {
        times: a.times,
        ratios,
        envelope,
    })
}
