//! Batch factor-graph estimation of GNSS receiver trajectories from
//! ionosphere-free pseudoranges, with six interchangeable robust
//! optimization schemes and a synthetic fault-injection harness.
//!
//! The crate is organised bottom-up:
//!
//! * [`gnss`]: measurement model (ionosphere-free combination, geometry,
//!   troposphere mapping, prediction and analytic Jacobians).
//! * [`graph`]: sparse factor graph and the damped Gauss-Newton
//!   (Levenberg-Marquardt) batch solver.
//! * [`robust`]: L2, Huber, Cauchy, switchable constraints, dynamic
//!   covariance scaling and max-mixtures.
//! * [`estimator`]: turns an observation stream into a graph and solves it.
//! * [`sim`]: truth trajectories, synthetic observations and fault injection.
//! * [`eval`]: RSOS error statistics and the fault-percentage sweep.
//! * [`io`]: the JSON-lines observation format and CSV writers.

pub mod estimator;
pub mod eval;
pub mod gnss;
pub mod graph;
pub mod io;
pub mod rng;
pub mod robust;
pub mod sim;

pub use estimator::{estimate, Estimate, EstimateError, EstimatorOptions};
pub use eval::{error_stats, fault_sweep, rsos_series, ErrorStats, SweepResult, SweepSetup};
pub use gnss::{
    EpochState, MappingFunction, PseudorangeModel, PseudorangeObservation, SatelliteContext,
    TimedState,
};
pub use graph::solver::{solve_lm, SolveReport, SolverConfig, SolverError};
pub use graph::{Factor, FactorGraph, GraphError, Values, VariableKey, VariableKind};
pub use robust::{RobustConfig, Scheme};
pub use sim::{FaultSpec, ScenarioSpec};
