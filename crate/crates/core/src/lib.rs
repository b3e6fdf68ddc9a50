//! Active learning for optimal-transport alignment.
//!
//! The crate solves entropy-regularized OT with supervision-modulated costs,
//! differentiates alignment utilities through the OT solution with the
//! adjoint-state method, and runs a budgeted query loop that picks the source
//! objects whose labels are expected to move the utility the most.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`problem`] | validated domain types, Laplacians |
//! | [`sinkhorn`] | supervised cost, entropic OT solver, sparsification |
//! | [`utility`] | squared-L2, entropy and consistency utilities with gradients |
//! | [`adjoint`] | adjoint system, conjugate gradient, cost gradients, query impacts |
//! | [`gradcheck`] | finite-difference checks of gradients and impacts |
//! | [`strategies`] | impact scorer and baseline query strategies |
//! | [`active`] | the query loop, oracles, metrics and session logs |
//! | [`data`] | file formats, feature costs, synthetic graph pairs |
//! | [`suite`] | the seeded synthetic benchmark and timing sweeps |

pub mod active;
pub mod adjoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod problem;
pub mod sinkhorn;
pub mod sparse;
pub mod strategies;
pub mod suite;
pub mod utility;

pub use error::{Error, Result};
pub use problem::{
    laplacian, validate_problem, AlignmentProblem, Coupling, CostMatrix, GraphPair, Marginals, ProblemParts,
    SupervisionSet, Support,
};
pub use sparse::SparseMatrix;
