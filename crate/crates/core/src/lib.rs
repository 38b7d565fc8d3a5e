//! Optimal flow control of a fixed-bed ion-exchange column.
//!
//! The breakthrough curve follows the Thomas model and is summarized by its
//! first four truncated temporal moments. Flow schedules are optimized with a
//! Pontryagin-style forward/backward sweep, either deterministically or with
//! second-order adjoints for Ito-process uncertainty.

// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod control;
pub mod deterministic;
pub mod dual;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod moments;
pub mod solver;
pub mod stochastic;
pub mod uncertainty;

pub use control::{ControlTrajectory, TimeGrid};
pub use deterministic::{AdjointState, SensitivityState};
pub use dynamics::RhsMode;
pub use error::{Error, Result};
pub use model::ProcessParams;
pub use moments::{MomentState, MomentTrajectory};
pub use solver::{solve_deterministic, IterationRecord, SignConvention, SolveReport, SolverConfig, StopReason};
pub use stochastic::{solve_stochastic, DiffusionModel, SecondOrderAdjoint};
pub use uncertainty::{DiffusionTable, EnsembleStats, UncertaintySpec};
