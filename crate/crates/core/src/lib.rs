//! Numerical toolkit for the leaf-cutter ant / fungus garden obligate
//! mutualism model.
//!
//! The model tracks total ant biomass `A` and fungus biomass `F`:
//!
//! ```text
//! dA/dt = (r_a F - d_a A) A
//! dF/dt = (r_f a A^2 / (b + a A^2) - d_f F - r_c A) F
//! ```
//!
//! where `a = p^2 q (1 - q)` condenses how the colony splits its workers
//! between leaf collection and garden care. Below the threshold
//! `a* = 4 b ((r_c r_a + d_f d_a) / (r_a r_f))^2` both species go extinct from
//! every start; above it the origin and an interior equilibrium are both
//! attractors, separated by the stable manifold of a saddle.
//!
//! Modules:
//!
//! - [`model`]: parameters, states, vector field, Jacobian, derived scalars
//! - [`ode`]: adaptive Dormand–Prince and implicit trapezoidal solvers
//! - [`dynamics`]: trajectories, terminal detection, attractor classification
//! - [`equilibria`]: closed-form equilibria and their stability
//! - [`basin`]: analytic extinction region and numerical basin maps
//! - [`sensitivity`]: forward (variational) sensitivities
//! - [`estimation`]: damped Gauss–Newton fitting to biomass time series
//!
//! Grid sweeps, per-target sensitivities and multistart fits run on rayon
//! when the default `parallel` feature is on; see [`Execution`].

pub mod basin;
pub mod dynamics;
pub mod equilibria;
pub mod error;
pub mod estimation;
pub mod io;
pub mod model;
pub mod ode;
mod parallel;
pub mod sensitivity;

pub use dynamics::{
    classify_limit, integrate, AttractorLabel, IntegratorConfig, TerminalFlag, Trajectory,
};
pub use equilibria::{classify, equilibria, nullclines, EquilibriumReport, Regime, StabilityClass};
pub use error::{Error, Result};
pub use model::{
    attracting_box, coexistence_threshold, jacobian, labor_coefficient, vector_field,
    AttractingBox, BiomassState, LaborAllocation, ModelParams, Param, ParamFile, Target,
};
pub use parallel::Execution;
