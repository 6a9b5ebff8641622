//! Grid-scale numerics for operator inclusions u(t) in F(t, (Au)(t)).
//!
//! The crate covers compact-set primitives, grid functions, Volterra and
//! Fredholm kernel operators, successive-approximation solvers with their
//! a-priori bounds, exact-penalty constants and a convex certificate checker,
//! second-order directional derivative estimators for nonsmooth functions,
//! and the adjoint gradient of infinite-horizon discrete control problems.

pub mod discrete_oc;
pub mod error;
pub mod gridfn;
pub mod inclusion;
pub mod multimap;
pub mod operators;
pub mod penalty;
pub mod second_order;
pub mod setval;

pub use error::{Error, Result};
pub use gridfn::{defect, Grid, GridFunction, GridKind};
pub use inclusion::{
    perturbation_study, solution_set_bound, solve_box, solve_fredholm, solve_volterra, BoundReport,
    InclusionSolution, IterationTrace,
};
pub use multimap::MultiMap;
pub use operators::{KernelOperator, OperatorKind};
pub use setval::{dist_to_set, hausdorff, minkowski_shift, CompactSet, SetDistanceResult};
pub use penalty::{Certificate, Endpoint, Integrand, PenaltyProblem};
pub use second_order::{estimate_second, EstimateKind, EstimatorOptions, ScalarField, Schedule};
pub use discrete_oc::DiscreteOCProblem;
