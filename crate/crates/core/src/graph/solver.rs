//! Damped Gauss-Newton (Levenberg-Marquardt) batch solver.
//!
//! Each outer iteration relinearizes every factor at the current estimate,
//! folds the robust IRLS weight of each pseudorange factor into its
//! information, and assembles sparse normal equations `H δ = −g`. Steps
//! solve `(H + λ·diag H) δ = −g`; a step is accepted when the robust
//! objective does not increase.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::{CscCholesky, CscSymbolicCholesky};
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FactorGraph, FactorKind, GraphError, Values, VariableKey};
use crate::robust::{augment_with_switches, RobustConfig, RobustError, Scheme};

/// Damping stops growing here; further rejection means no descent is left.
const MAX_LAMBDA: f64 = 1e12;
const MIN_LAMBDA: f64 = 1e-16;
/// Floor on the Marquardt scaling for variables with vanishing curvature.
const DIAG_FLOOR: f64 = 1e-9;
/// Smallest admissible squared pivot of the Jacobi-scaled information.
const PIVOT_TOL: f64 = 1e-10;
/// Relative objective increase tolerated for the final undamped step.
const REFINE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("variable {0} is not constrained by any measurement factor")]
    DisconnectedVariable(VariableKey),
    #[error("normal equations are singular (unobservable configuration)")]
    SingularNormalEquations,
    #[error("no convergence after {iterations} iterations")]
    MaxIterationsReached { iterations: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Robust(#[from] RobustError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub relative_error_tol: f64,
    pub absolute_error_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            relative_error_tol: 1e-8,
            absolute_error_tol: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = [
            ("initial_lambda", self.initial_lambda),
            ("relative_error_tol", self.relative_error_tol),
            ("absolute_error_tol", self.absolute_error_tol),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(SolverError::InvalidConfig(format!("{name} must be positive, got {v}")));
        }
        if self.max_iterations == 0 {
            return Err(SolverError::InvalidConfig("max_iterations must be positive".into()));
        }
        if !(self.lambda_up > 1.0) {
            return Err(SolverError::InvalidConfig(format!(
                "lambda_up must exceed 1, got {}",
                self.lambda_up
            )));
        }
        if !(self.lambda_down > 0.0 && self.lambda_down < 1.0) {
            return Err(SolverError::InvalidConfig(format!(
                "lambda_down must lie in (0, 1), got {}",
                self.lambda_down
            )));
        }
        Ok(())
    }
}

/// One attempted step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lambda: f64,
    /// Objective at the candidate point (infinite if it could not be evaluated).
    pub total_error: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Best iterate; includes switch variables when the scheme added them.
    pub values: Values,
    pub iterations: Vec<IterationRecord>,
    pub initial_error: f64,
    pub final_error: f64,
    pub converged: bool,
    /// Whether a final undamped step was applied after convergence. It is
    /// not part of `iterations`.
    pub refined: bool,
}

impl SolveReport {
    pub fn accepted_steps(&self) -> usize {
        self.iterations.iter().filter(|r| r.accepted).count()
    }

    /// Turns a non-converged report into [`SolverError::MaxIterationsReached`].
    pub fn ensure_converged(self) -> Result<Self, SolverError> {
        if self.converged {
            Ok(self)
        } else {
            let iterations = self.iterations.last().map_or(0, |r| r.iteration);
            Err(SolverError::MaxIterationsReached { iterations })
        }
    }
}

/// Column offsets of each variable in the linear system.
struct Layout {
    /// Indexed by the variable's insertion position in `Values`.
    offsets: Vec<usize>,
    dims: Vec<usize>,
    dim: usize,
    /// Per factor: insertion positions of its keys.
    factor_vars: Vec<Vec<usize>>,
    /// Order in which factors are summed.
    factor_order: Vec<usize>,
}

impl Layout {
    fn new(graph: &FactorGraph) -> Self {
        let values = graph.initial();
        let mut order: Vec<(usize, VariableKey)> = values.keys().copied().enumerate().collect();
        order.sort_by_key(|(_, k)| k.elimination_key());
        let mut offsets = vec![0; values.len()];
        let mut dims = vec![0; values.len()];
        let mut dim = 0;
        for (pos, key) in order {
            offsets[pos] = dim;
            dims[pos] = key.dim();
            dim += key.dim();
        }
        let factor_vars = graph
            .factors()
            .iter()
            .map(|f| {
                f.keys()
                    .iter()
                    .map(|k| values.index_of(k).expect("factor keys are registered"))
                    .collect()
            })
            .collect();
        Self {
            offsets,
            dims,
            dim,
            factor_vars,
            factor_order: graph.canonical_factor_order(),
        }
    }
}

/// Sparse normal equations at one linearization point.
struct NormalEquations {
    hessian: CscMatrix<f64>,
    gradient: DVector<f64>,
    /// Position of each diagonal entry in `hessian.values()`.
    diagonal: Vec<usize>,
}

impl NormalEquations {
    /// `weights = None` gives every factor unit weight.
    fn assemble(
        graph: &FactorGraph,
        values: &Values,
        layout: &Layout,
        robust: Option<&RobustConfig>,
    ) -> Result<Self, GraphError> {
        let n = layout.dim;
        let mut coo = CooMatrix::new(n, n);
        let mut gradient = DVector::zeros(n);
        for i in 0..n {
            coo.push(i, i, 0.0);
        }
        for &index in &layout.factor_order {
            let factor = &graph.factors()[index];
            let lin = factor.linearize(values, index)?;
            let weight = match robust {
                Some(cfg) if factor.kind() == FactorKind::Pseudorange && factor.switch_key().is_none() => {
                    cfg.pseudorange_term(lin.residual.norm()).weight
                }
                _ => 1.0,
            };
            let vars = &layout.factor_vars[index];
            for (a, ja) in vars.iter().zip(&lin.jacobians) {
                let oa = layout.offsets[*a];
                let ga = ja.transpose() * &lin.residual * weight;
                let mut slot = gradient.rows_mut(oa, ga.len());
                slot += &ga;
                for (b, jb) in vars.iter().zip(&lin.jacobians) {
                    let ob = layout.offsets[*b];
                    let block = ja.transpose() * jb * weight;
                    for c in 0..block.ncols() {
                        for r in 0..block.nrows() {
                            coo.push(oa + r, ob + c, block[(r, c)]);
                        }
                    }
                }
            }
        }
        let hessian = CscMatrix::from(&coo);
        let diagonal = (0..n)
            .map(|j| {
                let col = hessian.col(j);
                let k = col.row_indices().binary_search(&j).expect("diagonal is always present");
                hessian.col_offsets()[j] + k
            })
            .collect();
        Ok(Self {
            hessian,
            gradient,
            diagonal,
        })
    }

    fn symbolic(&self) -> CscSymbolicCholesky {
        CscSymbolicCholesky::factor(self.hessian.pattern().clone())
    }

    /// Solves `(H + λ·D) δ = −g`; `None` if the damped system is not
    /// positive definite.
    fn solve_damped(&self, symbolic: &CscSymbolicCholesky, lambda: f64) -> Option<DVector<f64>> {
        let mut damped = self.hessian.values().to_vec();
        for &d in &self.diagonal {
            damped[d] += lambda * damped[d].max(DIAG_FLOOR);
        }
        let chol = CscCholesky::factor_numerical(symbolic.clone(), &damped).ok()?;
        let rhs = DMatrix::from_column_slice(self.gradient.len(), 1, (-&self.gradient).as_slice());
        let step = chol.solve(&rhs);
        let step = DVector::from_column_slice(step.as_slice());
        step.iter().all(|v| v.is_finite()).then_some(step)
    }

    /// Checks that the undamped information has full rank after Jacobi
    /// scaling.
    fn is_full_rank(&self) -> bool {
        let diag: Vec<f64> = self.diagonal.iter().map(|&d| self.hessian.values()[d]).collect();
        if diag.iter().any(|d| !(*d > 0.0)) {
            return false;
        }
        let mut scaled = self.hessian.clone();
        let offsets = scaled.col_offsets().to_vec();
        let rows = scaled.row_indices().to_vec();
        let vals = scaled.values_mut();
        for j in 0..diag.len() {
            for k in offsets[j]..offsets[j + 1] {
                vals[k] /= (diag[rows[k]] * diag[j]).sqrt();
            }
        }
        match CscCholesky::factor(&scaled) {
            Ok(chol) => {
                let l = chol.l();
                (0..l.ncols()).all(|j| {
                    let col = l.col(j);
                    let k = col.row_indices().binary_search(&j).expect("diagonal in factor");
                    col.values()[k].powi(2) > PIVOT_TOL
                })
            }
            Err(_) => false,
        }
    }
}

fn check_connectivity(graph: &FactorGraph) -> Result<(), SolverError> {
    let mut anchored: HashMap<VariableKey, bool> =
        graph.initial().keys().map(|k| (*k, false)).collect();
    for factor in graph.factors() {
        if factor.kind() == FactorKind::SwitchPrior {
            continue;
        }
        for key in factor.keys() {
            anchored.insert(*key, true);
        }
    }
    // Report the first offender in insertion order.
    match graph.initial().keys().find(|k| !anchored[k]) {
        Some(key) => Err(SolverError::DisconnectedVariable(*key)),
        None => Ok(()),
    }
}

fn objective(graph: &FactorGraph, values: &Values, robust: &RobustConfig, layout: &Layout) -> Result<f64, GraphError> {
    graph.total_error_in(values, robust, layout.factor_order.iter().copied())
}

fn retract(values: &Values, layout: &Layout, step: &DVector<f64>) -> Values {
    let mut next = values.clone();
    for (pos, v) in next.values_mut().enumerate() {
        *v += step.rows(layout.offsets[pos], layout.dims[pos]);
    }
    next
}

/// Minimises the graph objective from its initial values.
///
/// With [`Scheme::SwitchConstraints`] an unaugmented graph is augmented
/// first; the returned values then include every switch.
pub fn solve_lm(
    graph: &FactorGraph,
    config: &SolverConfig,
    robust: &RobustConfig,
) -> Result<SolveReport, SolverError> {
    config.validate()?;
    robust.validate()?;
    if robust.scheme == Scheme::SwitchConstraints && !graph.is_augmented() {
        let augmented = augment_with_switches(graph.clone(), robust)?;
        return solve_prepared(&augmented, config, robust);
    }
    solve_prepared(graph, config, robust)
}

fn solve_prepared(
    graph: &FactorGraph,
    config: &SolverConfig,
    robust: &RobustConfig,
) -> Result<SolveReport, SolverError> {
    check_connectivity(graph)?;
    let layout = Layout::new(graph);
    let mut values = graph.initial().clone();

    let structural = NormalEquations::assemble(graph, &values, &layout, None)?;
    if !structural.is_full_rank() {
        return Err(SolverError::SingularNormalEquations);
    }
    let symbolic = structural.symbolic();
    drop(structural);

    let initial_error = objective(graph, &values, robust, &layout)?;
    let mut error = initial_error;
    let mut lambda = config.initial_lambda;
    let mut log = Vec::new();
    let mut converged = error == 0.0;
    let mut iteration = 0;

    'outer: while !converged && iteration < config.max_iterations {
        iteration += 1;
        let system = NormalEquations::assemble(graph, &values, &layout, Some(robust))?;
        loop {
            let candidate = system
                .solve_damped(&symbolic, lambda)
                .map(|step| retract(&values, &layout, &step));
            let candidate_error = candidate
                .as_ref()
                .and_then(|c| objective(graph, c, robust, &layout).ok())
                .filter(|e| e.is_finite());
            match (candidate, candidate_error) {
                (Some(next), Some(next_error)) if next_error <= error => {
                    log.push(IterationRecord {
                        iteration,
                        lambda,
                        total_error: next_error,
                        accepted: true,
                    });
                    let decrease = error - next_error;
                    converged = next_error == 0.0
                        || decrease < config.absolute_error_tol
                        || decrease <= config.relative_error_tol * error.abs();
                    values = next;
                    error = next_error;
                    lambda = (lambda * config.lambda_down).max(MIN_LAMBDA);
                    break;
                }
                (_, candidate_error) => {
                    log.push(IterationRecord {
                        iteration,
                        lambda,
                        total_error: candidate_error.unwrap_or(f64::INFINITY),
                        accepted: false,
                    });
                    lambda *= config.lambda_up;
                    if lambda > MAX_LAMBDA {
                        // No damping level decreases the objective: stationary.
                        converged = true;
                        break 'outer;
                    }
                }
            }
        }
    }

    let mut refined = false;
    if converged && error > 0.0 {
        // The last damped step stops short of the minimum by O(λ), a gap
        // the objective can no longer resolve in floating point. Finish
        // with a plain Gauss-Newton step unless it visibly hurts.
        let system = NormalEquations::assemble(graph, &values, &layout, Some(robust))?;
        if let Some(next) = system
            .solve_damped(&symbolic, 0.0)
            .map(|step| retract(&values, &layout, &step))
        {
            if let Ok(next_error) = objective(graph, &next, robust, &layout) {
                if next_error <= error * (1.0 + REFINE_SLACK) {
                    values = next;
                    error = next_error;
                    refined = true;
                }
            }
        }
    }

    Ok(SolveReport {
        values,
        iterations: log,
        initial_error,
        final_error: error,
        converged,
        refined,
    })
}
