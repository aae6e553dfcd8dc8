//! Exact discrete optimal transport between empirical measures.
//!
//! Equal-count uniform instances go through an assignment solver; anything
//! else through min-cost flow on the bipartite transportation graph. Both
//! expose dual potentials, which is what [`kr_duality_gap`] consumes.

mod assignment;
mod brute;
mod flow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{dist2, DiscretePlan, EmpiricalMeasure};

/// Largest instance accepted by [`brute_force_wasserstein`].
pub const BRUTE_FORCE_MAX: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OtSolution {
    pub distance: f64,
    pub p: u32,
    pub plan: DiscretePlan,
    /// LP potentials `(u, v)` with `u_i + v_j <= |x_i - y_j|^p`, when the
    /// solver produced them.
    pub duals: Option<(Vec<f64>, Vec<f64>)>,
}

impl OtSolution {
    /// Optimal value of the Kantorovich problem, `W_p^p`.
    pub fn optimal_cost(&self) -> f64 {
        self.distance.powi(self.p as i32)
    }
}

fn check_order(p: u32) -> Result<()> {
    if p == 1 || p == 2 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("order p = {p} not supported (use 1 or 2)")))
    }
}

fn cost_matrix(p: u32, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Vec<f64> {
    let mut cost = Vec::with_capacity(mu.len() * nu.len());
    for x in mu.points() {
        for y in nu.points() {
            let d2 = dist2(x, y);
            cost.push(if p == 2 { d2 } else { d2.sqrt() });
        }
    }
    cost
}

fn is_uniform(mu: &EmpiricalMeasure) -> bool {
    let w = 1.0 / mu.len() as f64;
    mu.weights().iter().all(|x| (x - w).abs() <= 1e-15)
}

/// `W_p(mu, nu)` for `p` in `{1, 2}` with an optimal plan.
pub fn wasserstein(p: u32, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<OtSolution> {
    check_order(p)?;
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch { expected: mu.dim(), got: nu.dim() });
    }
    let cost = cost_matrix(p, mu, nu);
    let (n, m) = (mu.len(), nu.len());
    let (coupling, u, v) = if n == m && is_uniform(mu) && is_uniform(nu) {
        let (assign, u, v) = assignment::solve(n, &cost);
        let mut coupling = vec![0.0; n * n];
        for (i, &j) in assign.iter().enumerate() {
            coupling[i * n + j] = mu.weights()[i];
        }
        (coupling, u, v)
    } else {
        let sol = flow::solve(mu.weights(), nu.weights(), &cost);
        (sol.coupling, sol.u, sol.v)
    };
    let value: f64 = coupling.iter().zip(&cost).map(|(g, c)| g * c).sum();
    let plan = DiscretePlan::new(mu.clone(), nu.clone(), coupling)?;
    Ok(OtSolution {
        distance: root(value.max(0.0), p),
        p,
        plan,
        duals: Some((u, v)),
    })
}

/// Convenience wrapper returning only the distance.
pub fn wasserstein_distance(p: u32, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    wasserstein(p, mu, nu).map(|s| s.distance)
}

fn root(value: f64, p: u32) -> f64 {
    if p == 2 {
        value.sqrt()
    } else {
        value
    }
}

/// Enumerates all `n!` matchings. Only for equal-count uniform instances
/// with `n <= 8`, where an optimal coupling is a permutation.
pub fn brute_force_wasserstein(p: u32, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<OtSolution> {
    check_order(p)?;
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch { expected: mu.dim(), got: nu.dim() });
    }
    let n = mu.len();
    if nu.len() != n {
        return Err(Error::InvalidArgument(format!(
            "brute force needs equal particle counts ({n} vs {})",
            nu.len()
        )));
    }
    if n > BRUTE_FORCE_MAX {
        return Err(Error::TooLarge { n, max: BRUTE_FORCE_MAX });
    }
    if !is_uniform(mu) || !is_uniform(nu) {
        return Err(Error::InvalidWeights("brute force requires uniform weights".into()));
    }
    let cost = cost_matrix(p, mu, nu);
    let (perm, total) = brute::best_permutation(n, &cost);
    let mut coupling = vec![0.0; n * n];
    for (i, &j) in perm.iter().enumerate() {
        coupling[i * n + j] = mu.weights()[i];
    }
    let plan = DiscretePlan::new(mu.clone(), nu.clone(), coupling)?;
    Ok(OtSolution {
        distance: root(total / n as f64, p),
        p,
        plan,
        duals: None,
    })
}

/// Primal minus dual value for a `W_1` solution. The dual side uses the
/// 1-Lipschitz potential `f(z) = min_j (|z - y_j| - v_j)` recovered from the
/// solver's column potentials, so the dual value is a valid lower bound.
pub fn kr_duality_gap(solution: &OtSolution) -> Result<f64> {
    if solution.p != 1 {
        return Err(Error::InvalidArgument("duality gap is defined for p = 1".into()));
    }
    let (_, v) = solution.duals.as_ref().ok_or(Error::NoDuals)?;
    let mu = solution.plan.source();
    let nu = solution.plan.target();
    let potential = |z: &[f64]| {
        nu.points()
            .zip(v)
            .map(|(y, vj)| dist2(z, y).sqrt() - vj)
            .fold(f64::INFINITY, f64::min)
    };
    let dual = mu.integrate_scalar(potential) - nu.integrate_scalar(potential);
    let primal = solution.plan.cost(1.0);
    Ok((primal - dual).abs())
}
