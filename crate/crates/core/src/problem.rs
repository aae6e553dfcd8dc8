//! The optimal control problem as a single value: dynamics, initial cloud,
//! costs and the admissible control set.

use serde::{Deserialize, Serialize};

use crate::dynamics::{gronwall_radius, simulate, ControlField, ControlSignal, NonlocalField, Trajectory};
use crate::error::{Error, Result};
use crate::functionals::{RunningCost, TerminalCost};
use crate::measures::EmpiricalMeasure;

/// Piecewise-constant controls on a fixed grid, every piece drawn from the
/// parameter family of `template` and kept inside the C1 ball of radius
/// `bound` over the working region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpace {
    pub template: ControlField,
    pub bound: f64,
    pub intervals: usize,
}

impl ControlSpace {
    pub fn new(template: ControlField, bound: f64, intervals: usize) -> Result<Self> {
        if !(bound > 0.0) {
            return Err(Error::InvalidArgument(format!("control bound {bound} must be positive")));
        }
        if intervals == 0 {
            return Err(Error::InvalidArgument("need at least one control interval".into()));
        }
        Ok(Self {
            template,
            bound,
            intervals,
        })
    }

    pub fn params_per_interval(&self) -> usize {
        self.template.num_params()
    }
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub field: NonlocalField,
    pub initial: EmpiricalMeasure,
    pub horizon: f64,
    pub dt: f64,
    pub terminal: TerminalCost,
    pub running: Option<RunningCost>,
    pub controls: ControlSpace,
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        let d = self.initial.dim();
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon {} must be positive", self.horizon)));
        }
        if self.controls.template.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.controls.template.dim(),
            });
        }
        self.terminal.validate(d)?;
        if let Some(r) = &self.running {
            r.validate(d)?;
        }
        crate::dynamics::time_grid(0.0, self.horizon, self.dt, &self.zero_control())?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.initial.dim()
    }

    /// Radius `R_T` of the ball containing every admissible trajectory.
    pub fn working_radius(&self) -> f64 {
        let m = self.field.lipschitz_bounds().m;
        gronwall_radius(self.initial.support_radius(), m + self.controls.bound, self.horizon)
    }

    pub fn zero_control(&self) -> ControlSignal {
        let zero = self.controls.template.with_params(&vec![0.0; self.controls.params_per_interval()]);
        self.constant_control(zero)
    }

    pub fn constant_control(&self, field: ControlField) -> ControlSignal {
        ControlSignal::uniform(self.horizon, self.controls.intervals, field).expect("validated control space")
    }

    /// Control signal from all interval parameters concatenated.
    pub fn control_from_params(&self, params: &[f64]) -> Result<ControlSignal> {
        let expected = self.controls.params_per_interval() * self.controls.intervals;
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(self.zero_control().with_params(params))
    }

    /// Field of the control space closest along its ray to `omega`.
    pub fn project_field(&self, omega: &ControlField) -> (ControlField, bool) {
        omega.project(self.working_radius(), self.controls.bound)
    }

    pub fn project(&self, u: &ControlSignal) -> (ControlSignal, bool) {
        let mut any = false;
        let fields = u
            .fields()
            .iter()
            .map(|f| {
                let (g, moved) = self.project_field(f);
                any |= moved;
                g
            })
            .collect();
        (ControlSignal::new(u.grid().to_vec(), fields).expect("same grid"), any)
    }

    pub fn is_feasible(&self, u: &ControlSignal) -> bool {
        let r = self.working_radius();
        u.fields()
            .iter()
            .all(|f| f.c1_norm(r) <= self.controls.bound * (1.0 + 1e-12))
    }

    pub fn simulate(&self, u: &ControlSignal) -> Result<Trajectory> {
        simulate(&self.field, u, &self.initial, self.horizon, self.dt)
    }
}
