//! Controlled non-local dynamics: interaction fields, controls and the
//! particle flow.

mod control;
mod field;
mod flow;

pub use control::{ControlField, ControlSignal, Feature, FEATURE_FAMILIES};
pub use field::{
    eval_velocity, kernel_jacobians, kernel_value, Drift, InteractionKernel, Kernel, LipschitzBounds,
    NonlocalField, DRIFT_FAMILIES, KERNEL_FAMILIES,
};
pub use flow::{
    contractivity_check, gronwall_radius, jacobian_flow, simulate, simulate_from, support_bound,
    ContractivityCurve, Trajectory,
};

pub(crate) use flow::{coupling_apply, coupling_apply_adjoint, local_jacobians, propagate, time_grid, velocities, Stage};
