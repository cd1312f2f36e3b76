//! Constrained stochastic linear-quadratic control on a binary scenario tree.
//!
//! The crate builds the tree, solves the penalized subproblems through
//! backward Riccati and adjoint recursions, runs the augmented Lagrangian
//! iteration on the terminal constraint, and checks results against a dense
//! KKT oracle, a duality gap and rank-based surjectivity tests.

pub mod alm;
pub mod controllability;
pub mod error;
pub mod instance;
pub mod model;
pub mod oracle;
pub mod riccati;
pub mod tree;

pub use alm::{alm_solve, AlmConfig, AlmReport, StepSchedule, Verdict};
pub use error::{Error, Result};
pub use instance::{Instance, InstanceConfig};
pub use model::ProblemData;
pub use tree::{NodeProcess, ScenarioTree, TimeGrid};
