#![allow(dead_code)]

use mfpmp::dynamics::{ControlField, ControlSignal, Feature, NonlocalField};
use mfpmp::functionals::{RunningCost, TerminalCost};
use mfpmp::{ControlSpace, EmpiricalMeasure, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_points(rng: &mut ChaCha8Rng, n: usize, d: usize, mean: f64, std: f64) -> Vec<f64> {
    let normal = Normal::new(mean, std).unwrap();
    (0..n * d).map(|_| normal.sample(rng)).collect()
}

pub fn uniform_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, spread: f64) -> EmpiricalMeasure {
    let pts = (0..n * d).map(|_| rng.random_range(-spread..spread)).collect();
    EmpiricalMeasure::new(d, pts, vec![1.0 / n as f64; n]).unwrap()
}

pub fn weighted_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, spread: f64) -> EmpiricalMeasure {
    let pts = (0..n * d).map(|_| rng.random_range(-spread..spread)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    EmpiricalMeasure::from_unnormalized(d, pts, w).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d * d).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_vector(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_affine(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> ControlField {
    ControlField::affine(random_matrix(rng, d, scale), random_vector(rng, d, scale)).unwrap()
}

pub fn random_affine_signal(rng: &mut ChaCha8Rng, d: usize, intervals: usize, horizon: f64, scale: f64) -> ControlSignal {
    let fields = (0..intervals).map(|_| random_affine(rng, d, scale)).collect();
    ControlSignal::piecewise(horizon, fields).unwrap()
}

/// `d/de f(e)` at 0 by the five-point stencil.
pub fn derivative4(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// Central differences at two step sizes combined to cancel the `h^2` term.
pub fn richardson_central(f: impl Fn(f64) -> Vec<f64>, e1: f64, e2: f64) -> Vec<f64> {
    let central = |e: f64| -> Vec<f64> {
        let (p, m) = (f(e), f(-e));
        p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * e)).collect()
    };
    let (d1, d2) = (central(e1), central(e2));
    let (a, b) = (e1 * e1, e2 * e2);
    d1.iter().zip(&d2).map(|(x, y)| (a * y - b * x) / (a - b)).collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Single particle at the origin steered towards `target` with energy cost:
/// the optimal constant control is `(target - x0) / (lambda + T)`.
pub const LQ_TARGET: [f64; 2] = [1.0, 0.5];
pub const LQ_LAMBDA: f64 = 1.0;

pub fn lq_problem() -> Problem {
    Problem {
        field: NonlocalField::zero(),
        initial: EmpiricalMeasure::dirac(&[0.0, 0.0]).unwrap(),
        horizon: 1.0,
        dt: 1e-3,
        terminal: TerminalCost::TargetAttraction {
            target: LQ_TARGET.to_vec(),
        },
        running: Some(RunningCost::ControlEnergy { weight: LQ_LAMBDA }),
        controls: ControlSpace::new(constant_template(), 1.0, 4).unwrap(),
    }
}

/// Spatially constant controls, one coefficient per axis.
pub fn constant_template() -> ControlField {
    let features = vec![
        Feature::Constant { direction: vec![1.0, 0.0] },
        Feature::Constant { direction: vec![0.0, 1.0] },
    ];
    ControlField::basis(features, vec![0.0, 0.0]).unwrap()
}

pub fn lq_optimum() -> Vec<f64> {
    LQ_TARGET.iter().map(|x| x / (LQ_LAMBDA + 1.0)).collect()
}

/// Variance minimization of a 1D cloud under linear attraction with a
/// control-energy penalty and affine controls.
pub fn consensus_problem() -> Problem {
    let mut r = rng(11);
    let pts = gaussian_points(&mut r, 16, 1, 0.3, 1.0);
    Problem {
        field: NonlocalField::linear_attraction(1.0),
        initial: EmpiricalMeasure::new(1, pts, vec![1.0 / 16.0; 16]).unwrap(),
        horizon: 1.0,
        dt: 1e-3,
        terminal: TerminalCost::Variance,
        running: Some(RunningCost::ControlEnergy { weight: 10.0 }),
        controls: ControlSpace::new(ControlField::zero_affine(1), 1.0, 20).unwrap(),
    }
}
