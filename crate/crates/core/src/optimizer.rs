//! Direct method: projected gradient descent over the control parameters,
//! with gradients assembled from the costate.

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlSignal, Trajectory};
use crate::error::Result;
use crate::functionals::{running_or_zero, terminal_value_flat};
use crate::pmp::{extremal, hamiltonian_param_gradient, Extremal};
use crate::problem::Problem;

/// `int_0^T L(mu(t), u(t)) dt + phi(mu(T))` along an existing trajectory.
pub fn total_cost_on(problem: &Problem, u: &ControlSignal, traj: &Trajectory) -> Result<f64> {
    let w = traj.weights();
    let running = problem.running.as_ref();
    let mut integral = 0.0;
    if running.is_some() {
        for n in 0..traj.steps() {
            let (a, b) = (traj.times[n], traj.times[n + 1]);
            let ctrl = u.field_at(0.5 * (a + b));
            let la = running_or_zero(running, traj.states[n].points_flat(), w, ctrl);
            let lb = running_or_zero(running, traj.states[n + 1].points_flat(), w, ctrl);
            integral += 0.5 * (b - a) * (la + lb);
        }
    }
    let end = traj.terminal();
    Ok(integral + terminal_value_flat(&problem.terminal, end.points_flat(), end.weights())?)
}

pub fn total_cost(problem: &Problem, u: &ControlSignal) -> Result<f64> {
    problem.validate()?;
    let traj = problem.simulate(u)?;
    total_cost_on(problem, u, &traj)
}

/// `-int_{t_k}^{t_k+1} D_theta H dt` for every interval, concatenated in the
/// order of [`ControlSignal::params`].
pub fn gradient_from_extremal(problem: &Problem, ext: &Extremal) -> Vec<f64> {
    let traj = &ext.trajectory;
    let u = &ext.control;
    let running = problem.running.as_ref();
    let mut per_interval: Vec<Vec<f64>> = u.fields().iter().map(|f| vec![0.0; f.num_params()]).collect();
    for n in 0..traj.steps() {
        let (a, b) = (traj.times[n], traj.times[n + 1]);
        let k = u.interval_index(0.5 * (a + b));
        let omega = &u.fields()[k];
        let ga = hamiltonian_param_gradient(&traj.states[n], ext.costate.costate(n), running, omega);
        let gb = hamiltonian_param_gradient(&traj.states[n + 1], ext.costate.costate(n + 1), running, omega);
        for ((g, x), y) in per_interval[k].iter_mut().zip(&ga).zip(&gb) {
            *g -= 0.5 * (b - a) * (x + y);
        }
    }
    per_interval.concat()
}

pub fn parameter_gradient(problem: &Problem, u: &ControlSignal) -> Result<Vec<f64>> {
    let ext = extremal(problem, u)?;
    Ok(gradient_from_extremal(problem, &ext))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    pub max_iters: usize,
    /// Stop once the projected-gradient norm falls below this.
    pub tol: f64,
    pub initial_step: f64,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    pub max_halvings: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-5,
            initial_step: 1.0,
            armijo: 1e-4,
            max_halvings: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Iterate {
    pub control: ControlSignal,
    pub cost: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizationRun {
    pub iterates: Vec<Iterate>,
    pub extremal: Extremal,
    pub cost: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Set when a line search exhausted its halvings.
    pub line_search_failed: bool,
}

impl OptimizationRun {
    pub fn control(&self) -> &ControlSignal {
        &self.extremal.control
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `|theta - P(theta - g)|`, equal to `|g|` in the interior.
fn projected_gradient_norm(problem: &Problem, u: &ControlSignal, g: &[f64]) -> f64 {
    let theta = u.params();
    let trial: Vec<f64> = theta.iter().zip(g).map(|(t, d)| t - d).collect();
    let (p, _) = problem.project(&u.with_params(&trial));
    norm(&theta.iter().zip(p.params()).map(|(a, b)| a - b).collect::<Vec<_>>())
}

/// Projected gradient descent with Barzilai-Borwein trial steps and
/// Armijo backtracking. `u0` is projected onto the control set first.
pub fn optimize(problem: &Problem, u0: &ControlSignal, options: &OptimizerOptions) -> Result<OptimizationRun> {
    problem.validate()?;
    let (mut u, _) = problem.project(u0);
    let mut ext = extremal(problem, &u)?;
    let mut cost = total_cost_on(problem, &u, &ext.trajectory)?;
    let mut grad = gradient_from_extremal(problem, &ext);
    let mut gnorm = projected_gradient_norm(problem, &u, &grad);
    let mut iterates = vec![Iterate {
        control: u.clone(),
        cost,
        gradient_norm: gnorm,
    }];
    let mut step = options.initial_step;
    let mut line_search_failed = false;

    for _ in 0..options.max_iters {
        if gnorm <= options.tol {
            break;
        }
        let theta = u.params();
        let mut accepted = None;
        let mut s = step;
        for _ in 0..=options.max_halvings {
            let trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - s * g).collect();
            let (candidate, _) = problem.project(&u.with_params(&trial));
            let moved: Vec<f64> = candidate.params().iter().zip(&theta).map(|(a, b)| a - b).collect();
            let decrease: f64 = grad.iter().zip(&moved).map(|(g, m)| g * m).sum();
            if let Ok(traj) = problem.simulate(&candidate) {
                let c = total_cost_on(problem, &candidate, &traj)?;
                if c < cost && c <= cost + options.armijo * decrease {
                    accepted = Some((candidate, c, moved));
                    break;
                }
            }
            s *= 0.5;
        }
        let Some((next, next_cost, moved)) = accepted else {
            line_search_failed = true;
            break;
        };
        let next_ext = extremal(problem, &next)?;
        let next_grad = gradient_from_extremal(problem, &next_ext);
        let dg: Vec<f64> = next_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = moved.iter().zip(&dg).map(|(a, b)| a * b).sum();
        let ss: f64 = moved.iter().map(|a| a * a).sum();
        step = if sy > 0.0 { ss / sy } else { s * 2.0 };
        u = next;
        ext = next_ext;
        cost = next_cost;
        grad = next_grad;
        gnorm = projected_gradient_norm(problem, &u, &grad);
        iterates.push(Iterate {
            control: u.clone(),
            cost,
            gradient_norm: gnorm,
        });
    }

    Ok(OptimizationRun {
        iterates,
        extremal: ext,
        cost,
        gradient_norm: gnorm,
        converged: gnorm <= options.tol,
        line_search_failed,
    })
}
