//! Scenario files: a strict JSON description of one control problem plus the
//! settings of the runs performed on it.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlField, ControlSignal, Drift, Kernel, NonlocalField};
use crate::error::{Error, Result};
use crate::functionals::{RunningCost, TerminalCost};
use crate::measures::EmpiricalMeasure;
use crate::optimizer::OptimizerOptions;
use crate::problem::{ControlSpace, Problem};

/// Explicit particles or a seeded sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    /// Uniform weights unless `weights` is given; weights are normalized.
    Points {
        points: Vec<Vec<f64>>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    /// `n` i.i.d. draws of `N(mean, std^2 I)`.
    Gaussian { n: usize, mean: Vec<f64>, std: f64 },
    /// `n` i.i.d. uniform draws in the ball.
    UniformBall { n: usize, center: Vec<f64>, radius: f64 },
}

pub const MEASURE_KINDS: &[&str] = &["points", "gaussian", "uniform_ball"];

impl MeasureSpec {
    fn violations(&self, dim: usize, what: &str) -> Vec<String> {
        let mut v = Vec::new();
        match self {
            MeasureSpec::Points { points, weights } => {
                if points.is_empty() {
                    v.push(format!("{what}: point list is empty"));
                }
                for (i, p) in points.iter().enumerate().filter(|(_, p)| p.len() != dim) {
                    v.push(format!("{what}: point {i} has dimension {}, expected {dim}", p.len()));
                }
                if let Some(w) = weights {
                    if w.len() != points.len() {
                        v.push(format!("{what}: {} weights for {} points", w.len(), points.len()));
                    }
                    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || !(w.iter().sum::<f64>() > 0.0) {
                        v.push(format!("{what}: weights must be nonnegative with positive sum"));
                    }
                }
            }
            MeasureSpec::Gaussian { n, mean, std } => {
                if *n == 0 {
                    v.push(format!("{what}: n must be positive"));
                }
                if mean.len() != dim {
                    v.push(format!("{what}: mean has dimension {}, expected {dim}", mean.len()));
                }
                if !(std.is_finite() && *std >= 0.0) {
                    v.push(format!("{what}: std {std} must be nonnegative"));
                }
            }
            MeasureSpec::UniformBall { n, center, radius } => {
                if *n == 0 {
                    v.push(format!("{what}: n must be positive"));
                }
                if center.len() != dim {
                    v.push(format!("{what}: center has dimension {}, expected {dim}", center.len()));
                }
                if !(radius.is_finite() && *radius >= 0.0) {
                    v.push(format!("{what}: radius {radius} must be nonnegative"));
                }
            }
        }
        v
    }

    pub fn build(&self, dim: usize, seed: u64) -> Result<EmpiricalMeasure> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            MeasureSpec::Points { points, weights } => {
                let flat = points.concat();
                let w = weights.clone().unwrap_or_else(|| vec![1.0; points.len()]);
                EmpiricalMeasure::from_unnormalized(dim, flat, w)
            }
            MeasureSpec::Gaussian { n, mean, std } => {
                let normal = Normal::new(0.0, *std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let flat = (0..*n)
                    .flat_map(|_| mean.iter().map(|m| m + normal.sample(&mut rng)).collect::<Vec<_>>())
                    .collect();
                EmpiricalMeasure::new(dim, flat, vec![1.0 / *n as f64; *n])
            }
            MeasureSpec::UniformBall { n, center, radius } => {
                let mut flat = Vec::with_capacity(n * dim);
                for _ in 0..*n {
                    let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = dir.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
                    flat.extend(center.iter().zip(&dir).map(|(c, u)| c + r * u / norm));
                }
                EmpiricalMeasure::new(dim, flat, vec![1.0 / *n as f64; *n])
            }
        }
    }
}

/// Pass thresholds of the condition checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative slack of the maximization condition.
    pub maximization: f64,
    /// Relative bound on the Hamiltonian's parameter derivatives.
    pub stationarity: f64,
    /// Lower bound `-first_order` on needle first-order values.
    pub first_order: f64,
    /// Relative bound on `max |K(t) - K(T)|`.
    pub k_constancy: f64,
    /// Relative drift of the Hamiltonian within each control interval.
    pub hamiltonian: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            maximization: 1e-4,
            stationarity: 1e-3,
            first_order: 1e-4,
            k_constancy: 1e-3,
            hamiltonian: 1e-5,
        }
    }
}

/// Sizes of the probe sets used by the checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Probes {
    /// Levels per parameter of the candidate grid.
    pub candidate_levels: usize,
    /// Needle times `tau = j T / needle_times`.
    pub needle_times: usize,
    /// Needle values drawn from the candidate grid.
    pub needle_values: usize,
    /// Random needles for the K-constancy report.
    pub k_samples: usize,
}

impl Default for Probes {
    fn default() -> Self {
        Self {
            candidate_levels: 5,
            needle_times: 10,
            needle_values: 10,
            k_samples: 10,
        }
    }
}

fn default_dt() -> f64 {
    1e-3
}

fn default_field() -> NonlocalField {
    NonlocalField::zero()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub dim: usize,
    pub initial: MeasureSpec,
    /// Second measure for `ot`.
    #[serde(default)]
    pub target: Option<MeasureSpec>,
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_field")]
    pub field: NonlocalField,
    /// Defaults to affine controls on one interval with bound 1.
    #[serde(default)]
    pub controls: Option<ControlSpace>,
    /// Control parameters of all intervals concatenated; zero when absent.
    #[serde(default)]
    pub control: Option<Vec<f64>>,
    pub terminal: TerminalCost,
    #[serde(default)]
    pub running: Option<RunningCost>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub probes: Probes,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
}

/// A validated scenario with its problem and control built.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub problem: Problem,
    pub control: ControlSignal,
    pub target: Option<EmpiricalMeasure>,
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario> {
    serde_json::from_str(text).map_err(|e| Error::Scenario(vec![e.to_string()]))
}

pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Scenario(vec![format!("cannot read {}: {e}", path.display())]))?;
    parse_scenario_str(&text)
}

fn positive(v: &mut Vec<String>, name: &str, x: f64) {
    if !(x.is_finite() && x > 0.0) {
        v.push(format!("{name} = {x} must be positive"));
    }
}

impl Scenario {
    pub fn control_space(&self) -> ControlSpace {
        self.controls.clone().unwrap_or_else(|| ControlSpace {
            template: ControlField::zero_affine(self.dim.max(1)),
            bound: 1.0,
            intervals: 1,
        })
    }

    /// Every invariant violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let d = self.dim;
        if d == 0 {
            v.push("dim must be positive".into());
            return v;
        }
        positive(&mut v, "horizon", self.horizon);
        positive(&mut v, "dt", self.dt);
        v.extend(self.initial.violations(d, "initial"));
        if let Some(t) = &self.target {
            v.extend(t.violations(d, "target"));
        }

        if !self.field.check_dim(d) {
            v.push(format!("field.drift does not match dimension {d}"));
        }
        match &self.field.kernel {
            Kernel::Gaussian { width, strength } => {
                positive(&mut v, "field.kernel.width", *width);
                if !strength.is_finite() {
                    v.push("field.kernel.strength must be finite".into());
                }
            }
            Kernel::LinearAttraction { strength } if !strength.is_finite() => {
                v.push("field.kernel.strength must be finite".into());
            }
            _ => {}
        }
        if let Drift::Constant { value } | Drift::Linear { offset: value, .. } = &self.field.drift {
            if value.iter().any(|x| !x.is_finite()) {
                v.push("field.drift has non-finite entries".into());
            }
        }

        let space = self.control_space();
        positive(&mut v, "controls.bound", space.bound);
        if space.intervals == 0 {
            v.push("controls.intervals must be positive".into());
        }
        if space.template.dim() != d {
            v.push(format!(
                "controls.template has dimension {}, expected {d}",
                space.template.dim()
            ));
        }
        if self.horizon > 0.0 && self.dt > 0.0 && space.intervals > 0 {
            let len = self.horizon / space.intervals as f64;
            let q = len / self.dt;
            if (q - q.round()).abs() > 1e-6 || q.round() < 1.0 {
                for k in 0..space.intervals {
                    v.push(format!(
                        "dt = {} does not divide control interval {k} [{}, {}]",
                        self.dt,
                        k as f64 * len,
                        (k + 1) as f64 * len
                    ));
                }
            }
        }
        if let Some(p) = &self.control {
            let expected = space.params_per_interval() * space.intervals;
            if p.len() != expected {
                v.push(format!("control has {} parameters, expected {expected}", p.len()));
            }
        }

        if let Err(e) = self.terminal.validate(d) {
            v.push(format!("terminal: {e}"));
        }
        if let Some(Err(e)) = self.running.as_ref().map(|r| r.validate(d)) {
            v.push(format!("running: {e}"));
        }

        let t = &self.tolerances;
        for (name, x) in [
            ("tolerances.maximization", t.maximization),
            ("tolerances.stationarity", t.stationarity),
            ("tolerances.first_order", t.first_order),
            ("tolerances.k_constancy", t.k_constancy),
            ("tolerances.hamiltonian", t.hamiltonian),
            ("optimizer.tol", self.optimizer.tol),
            ("optimizer.initial_step", self.optimizer.initial_step),
        ] {
            positive(&mut v, name, x);
        }
        if self.probes.candidate_levels < 2 {
            v.push("probes.candidate_levels must be at least 2".into());
        }
        v
    }

    /// Validates, samples the measures and builds the problem.
    pub fn prepare(&self) -> Result<Prepared> {
        let v = self.violations();
        if !v.is_empty() {
            return Err(Error::Scenario(v));
        }
        let wrap = |what: &str, e: Error| Error::Scenario(vec![format!("{what}: {e}")]);
        let initial = self.initial.build(self.dim, self.seed).map_err(|e| wrap("initial", e))?;
        let target = match &self.target {
            Some(t) => Some(t.build(self.dim, self.seed.wrapping_add(1)).map_err(|e| wrap("target", e))?),
            None => None,
        };
        let problem = Problem {
            field: self.field.clone(),
            initial,
            horizon: self.horizon,
            dt: self.dt,
            terminal: self.terminal.clone(),
            running: self.running.clone(),
            controls: self.control_space(),
        };
        problem.validate().map_err(|e| wrap("problem", e))?;
        let control = match &self.control {
            Some(p) => problem.control_from_params(p)?,
            None => problem.zero_control(),
        };
        Ok(Prepared {
            scenario: self.clone(),
            problem,
            control,
            target,
        })
    }
}
