//! Particle methods for optimal control of non-local continuity equations
//! in Wasserstein space: forward flows, exact optimal transport, first-order
//! variations, the Pontryagin costate system and a direct optimizer.

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod functionals;
pub mod linalg;
pub mod measures;
pub mod optimizer;
pub mod pmp;
pub mod problem;
pub mod transport;
pub mod variations;

pub use error::{Error, Result};
pub use measures::{DiscretePlan, EmpiricalMeasure};
pub use problem::{ControlSpace, Problem};
