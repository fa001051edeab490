//! Finite-horizon local/remote LQ control of networked multiplicative-noise
//! systems with Bernoulli uplink dropouts.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds the problem instance, validation and block stacking.
//! * [`riccati`] solves the coupled Riccati recursions and their reductions.
//! * [`synthesis`] turns a Riccati solution into gains and the closed-form cost.
//! * [`estimator`] is the remote-side estimator run inside simulations.
//! * [`simulator`] rolls out the closed loop with seeded Monte Carlo.
//! * [`oracle`] evaluates the exact expected cost of any linear strategy.
//!
//! ```
//! use ncs_core::{model, riccati, synthesis, oracle};
//!
//! let m = model::reference_instance().unwrap().with_horizon(5);
//! let m = model::validate(m, model::Mode::Indefinite).unwrap();
//! let s = model::stack(&m);
//! let sol = riccati::solve_cre(&m, &s, riccati::Coupling::Consistent).unwrap();
//! let g = synthesis::gains(&sol).unwrap();
//! let closed = synthesis::optimal_cost(&sol, &m).unwrap();
//! let exact = oracle::exact_cost(&m, &s, &g).unwrap();
//! assert!((closed - exact).abs() <= 1e-8 * exact.abs());
//! ```

// NaN must fail the range checks, hence the negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod riccati;
pub mod simulator;
pub mod synthesis;

mod serde_matrix;

pub use error::{Error, Result};
pub use estimator::EstimatorState;
pub use model::{Mode, NetworkModel, StackedModel, SubsystemModel, ValidatedModel};
pub use oracle::{CostateCheck, CostateMoments, MomentState};
pub use riccati::{Coupling, CreSolution, DefinitenessReport, GeneralizedCreSolution};
pub use simulator::{SimOptions, SimulationSummary, SimulationTrace, SweepEntry};
pub use synthesis::GainSchedule;

pub use nalgebra::{DMatrix, DVector};
