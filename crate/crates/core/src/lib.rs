//! Linear-quadratic optimal control of mean-field stochastic differential
//! equations driven by a Brownian motion and a compensated Poisson random
//! measure with finitely many atoms.
//!
//! * [`model`]: problem instances, JSON ingestion and validation.
//! * [`riccati`]: the two backward Riccati equations and feedback gains.
//! * [`meanflow`]: the deterministic mean trajectory under a control law.
//! * [`simulator`]: interacting-particle simulation, cost estimation,
//!   adjoint reconstruction and optimality checks.
//! * [`oracle`]: exact scenario-tree solver used to certify the above.

// `!(x >= tol)` style checks are meant to catch NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod meanflow;
pub mod model;
pub mod oracle;
pub mod riccati;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
pub use linalg::{Mat, Vector};
pub use meanflow::{propagate_mean, MeanTrajectory};
pub use model::{total_intensity, validate_model, JumpAtom, JumpMeasure, ModelSpec, Track, ValidationReport};
pub use riccati::{feedback_gains, optimal_value, solve_riccati, Convention, FeedbackLaw, RiccatiSolution};
pub use simulator::{estimate_cost, simulate_paths, ControlLaw, CostEstimate, PathEnsemble};
