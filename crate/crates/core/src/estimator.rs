//! Builds the batch factor graph from an observation stream and solves it.
//!
//! One state per distinct epoch time, a pseudorange factor per admitted
//! observation and, optionally, a random-walk between factor linking
//! consecutive states.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnss::{elevation_angle, EpochState, GnssError, MappingFunction, PseudorangeObservation, TimedState};
use crate::graph::solver::{solve_lm, SolveReport, SolverConfig, SolverError};
use crate::graph::{Factor, FactorGraph, GaussianNoise, GraphError, VariableKey, VariableKind};
use crate::robust::{augment_with_switches, switch_function, RobustConfig, RobustError, Scheme};

const COARSE_ITERATIONS: usize = 20;
const MIN_SATELLITES: usize = 4;
/// Above this many satellites the subset search is skipped.
const MAX_CONSENSUS_SATELLITES: usize = 14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimateError {
    #[error("no observations")]
    NoObservations,
    #[error("unobservable: {0}")]
    Unobservable(String),
    #[error("invalid estimator options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Solver(SolverError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Robust(#[from] RobustError),
}

impl From<SolverError> for EstimateError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::DisconnectedVariable(k) => {
                Self::Unobservable(format!("variable {k} is not constrained by any measurement"))
            }
            SolverError::SingularNormalEquations => {
                Self::Unobservable("normal equations are singular".into())
            }
            other => Self::Solver(other),
        }
    }
}

impl EstimateError {
    pub fn is_unobservable(&self) -> bool {
        matches!(self, Self::Unobservable(_) | Self::NoObservations)
    }
}

/// Graph construction options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorOptions {
    pub elevation_mask_deg: f64,
    pub mapping: MappingFunction,
    /// Link consecutive states with random-walk between factors.
    pub between_factors: bool,
    /// Random-walk densities (m/√s) of position, clock and zenith delay.
    pub position_process_sigma: f64,
    pub clock_process_sigma: f64,
    pub tropo_process_sigma: f64,
    /// Zenith delay used for initialization, meters.
    pub nominal_zenith_tropo: f64,
    /// Inlier bound (whitened residual) of the subset search used for
    /// initialization; 0 disables the search.
    pub consensus_threshold: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            elevation_mask_deg: 10.0,
            mapping: MappingFunction::default(),
            between_factors: true,
            position_process_sigma: 0.2,
            clock_process_sigma: 5.0,
            tropo_process_sigma: 0.01,
            nominal_zenith_tropo: 2.3,
            consensus_threshold: 8.0,
        }
    }
}

impl EstimatorOptions {
    pub fn validate(&self) -> Result<(), EstimateError> {
        let sigmas = [
            ("position_process_sigma", self.position_process_sigma),
            ("clock_process_sigma", self.clock_process_sigma),
            ("tropo_process_sigma", self.tropo_process_sigma),
        ];
        if let Some((name, v)) = sigmas.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(EstimateError::InvalidOptions(format!("{name} must be positive, got {v}")));
        }
        if !(self.consensus_threshold >= 0.0) || !self.nominal_zenith_tropo.is_finite() {
            return Err(EstimateError::InvalidOptions(
                "consensus_threshold must be non-negative and nominal_zenith_tropo finite".into(),
            ));
        }
        if !(-90.0..=90.0).contains(&self.elevation_mask_deg) {
            return Err(EstimateError::InvalidOptions(format!(
                "elevation mask {} outside [-90, 90]",
                self.elevation_mask_deg
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochEstimate {
    pub t: f64,
    pub state: EpochState,
    /// Observations admitted by the elevation mask.
    pub n_sats: usize,
    /// Mean clamped switch value at this epoch (switchable constraints only).
    pub mean_switch: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub epochs: Vec<EpochEstimate>,
    pub report: SolveReport,
}

impl Estimate {
    pub fn trajectory(&self) -> Vec<TimedState> {
        self.epochs
            .iter()
            .map(|e| TimedState { t: e.t, state: e.state })
            .collect()
    }
}

/// Observations grouped by epoch time, in ascending time order. Within an
/// epoch the input order is kept.
pub fn group_by_epoch(observations: &[PseudorangeObservation]) -> Vec<(f64, Vec<&PseudorangeObservation>)> {
    let mut order: Vec<usize> = (0..observations.len()).collect();
    order.sort_by(|&a, &b| observations[a].epoch.total_cmp(&observations[b].epoch).then(a.cmp(&b)));
    let mut groups: Vec<(f64, Vec<&PseudorangeObservation>)> = Vec::new();
    for i in order {
        let obs = &observations[i];
        match groups.last_mut() {
            Some((t, group)) if *t == obs.epoch => group.push(obs),
            _ => groups.push((obs.epoch, vec![obs])),
        }
    }
    groups
}

/// Gauss-Newton fit of position and clock with the slant troposphere of
/// each observation held fixed at `slant[i]`.
fn fit_position_clock(
    observations: &[&PseudorangeObservation],
    slant: &[f64],
    start: Vector4<f64>,
) -> Option<Vector4<f64>> {
    let mut x = start;
    for _ in 0..COARSE_ITERATIONS {
        let n = observations.len();
        let mut a = DMatrix::zeros(n, 4);
        let mut b = DVector::zeros(n);
        for (i, obs) in observations.iter().enumerate() {
            let diff = x.xyz() - obs.sat.position;
            let range = diff.norm();
            if range == 0.0 {
                return None;
            }
            let predicted = range + x[3] - obs.sat.clock_bias + obs.sat.corrections() + slant[i];
            let u = diff / range;
            a.row_mut(i).copy_from_slice(&[u.x, u.y, u.z, 1.0]);
            b[i] = obs.rho_if - predicted;
        }
        let dx = a.svd(true, true).solve(&b, 1e-12).ok()?;
        x += Vector4::from_column_slice(dx.as_slice());
        if dx.norm() < 1e-6 {
            break;
        }
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn fit_residuals(observations: &[&PseudorangeObservation], slant: &[f64], x: &Vector4<f64>) -> Vec<f64> {
    observations
        .iter()
        .zip(slant)
        .map(|(obs, s)| {
            let predicted = (x.xyz() - obs.sat.position).norm() + x[3] - obs.sat.clock_bias
                + obs.sat.corrections()
                + s;
            (obs.rho_if - predicted) / obs.sigma
        })
        .collect()
}

/// Single-epoch Gauss-Newton fix of position and clock, ignoring the
/// troposphere, started from the Earth center.
pub fn coarse_fix(observations: &[&PseudorangeObservation]) -> Option<(Vector3<f64>, f64)> {
    if observations.len() < MIN_SATELLITES {
        return None;
    }
    let slant = vec![0.0; observations.len()];
    fit_position_clock(observations, &slant, Vector4::zeros()).map(|x| (x.xyz(), x[3]))
}

/// Initial state for one epoch.
///
/// Starts from the all-in coarse fix, models the troposphere with the
/// nominal zenith delay and then, if enabled, keeps the four-satellite
/// subset fit that agrees with the most observations and refits on its
/// inliers. Least squares does not depend on this choice; the robust
/// schemes are non-convex and do.
pub fn initial_fix(observations: &[&PseudorangeObservation], options: &EstimatorOptions) -> Option<EpochState> {
    let (position, clock) = coarse_fix(observations)?;
    let slant: Vec<f64> = observations
        .iter()
        .map(|obs| {
            elevation_angle(&position, &obs.sat.position)
                .ok()
                .filter(|el| *el > 0.0)
                .and_then(|el| options.mapping.evaluate(el).ok())
                .map_or(0.0, |m| options.nominal_zenith_tropo * m)
        })
        .collect();
    let start = Vector4::new(position.x, position.y, position.z, clock);
    let mut x = fit_position_clock(observations, &slant, start)?;

    let n = observations.len();
    if options.consensus_threshold > 0.0 && n > MIN_SATELLITES && n <= MAX_CONSENSUS_SATELLITES {
        let mut best: Option<(usize, f64, Vec<usize>)> = None;
        for subset in (0..n).combinations(MIN_SATELLITES) {
            let obs: Vec<_> = subset.iter().map(|&i| observations[i]).collect();
            let sl: Vec<f64> = subset.iter().map(|&i| slant[i]).collect();
            let Some(fit) = fit_position_clock(&obs, &sl, x) else { continue };
            let residuals = fit_residuals(observations, &slant, &fit);
            let inliers: Vec<usize> = (0..n)
                .filter(|&i| residuals[i].abs() <= options.consensus_threshold)
                .collect();
            let spread: f64 = inliers.iter().map(|&i| residuals[i].powi(2)).sum();
            let better = match &best {
                None => true,
                Some((count, cost, _)) => inliers.len() > *count || (inliers.len() == *count && spread < *cost),
            };
            if better {
                best = Some((inliers.len(), spread, inliers));
            }
        }
        if let Some((count, _, inliers)) = best {
            if count >= MIN_SATELLITES {
                let obs: Vec<_> = inliers.iter().map(|&i| observations[i]).collect();
                let sl: Vec<f64> = inliers.iter().map(|&i| slant[i]).collect();
                if let Some(refit) = fit_position_clock(&obs, &sl, x) {
                    x = refit;
                }
            }
        }
    }
    Some(EpochState::new(x.xyz(), x[3], options.nominal_zenith_tropo))
}

struct EpochPlan<'a> {
    t: f64,
    admitted: Vec<&'a PseudorangeObservation>,
    initial: Option<EpochState>,
}

fn plan_epochs<'a>(
    observations: &'a [PseudorangeObservation],
    options: &EstimatorOptions,
) -> Vec<EpochPlan<'a>> {
    group_by_epoch(observations)
        .into_iter()
        .map(|(t, group)| {
            let admitted: Vec<_> = match coarse_fix(&group) {
                Some((position, _)) => group
                    .into_iter()
                    .filter(|obs| {
                        elevation_angle(&position, &obs.sat.position)
                            .map(|el| el.to_degrees() >= options.elevation_mask_deg)
                            .unwrap_or(false)
                    })
                    .collect(),
                // Without a position fix elevations are unknown: admit nothing.
                None => Vec::new(),
            };
            let initial = initial_fix(&admitted, options);
            EpochPlan { t, admitted, initial }
        })
        .collect()
}

/// Builds the (unaugmented) factor graph for an observation stream.
/// Returns the graph, epoch times and admitted counts.
pub fn build_graph(
    observations: &[PseudorangeObservation],
    options: &EstimatorOptions,
) -> Result<(FactorGraph, Vec<(f64, usize)>), EstimateError> {
    options.validate()?;
    if observations.is_empty() {
        return Err(EstimateError::NoObservations);
    }
    let plans = plan_epochs(observations, options);
    let anchors: Vec<usize> = (0..plans.len()).filter(|&i| plans[i].initial.is_some()).collect();
    if anchors.is_empty() {
        return Err(EstimateError::Unobservable(format!(
            "no epoch has {MIN_SATELLITES} usable observations"
        )));
    }

    let mut graph = FactorGraph::new();
    for (k, plan) in plans.iter().enumerate() {
        let initial = plan.initial.unwrap_or_else(|| {
            let nearest = anchors
                .iter()
                .min_by_key(|&&a| a.abs_diff(k))
                .expect("anchors is non-empty");
            plans[*nearest].initial.expect("anchor has an initial state")
        });
        let key = VariableKey::state(k);
        graph.add_variable(key, DVector::from_column_slice(initial.to_vector().as_slice()))?;
        for obs in &plan.admitted {
            graph.add_factor(Factor::pseudorange(key, (*obs).clone(), options.mapping)?)?;
        }
        if options.between_factors && k > 0 {
            let dt = plan.t - plans[k - 1].t;
            let root = dt.sqrt();
            let p = options.position_process_sigma * root;
            let noise = GaussianNoise::from_sigmas(&[
                p,
                p,
                p,
                options.clock_process_sigma * root,
                options.tropo_process_sigma * root,
            ])?;
            graph.add_factor(Factor::between(VariableKey::state(k - 1), key, DVector::zeros(5), noise)?)?;
        }
    }
    let epochs = plans.iter().map(|p| (p.t, p.admitted.len())).collect();
    Ok((graph, epochs))
}

/// Estimates the receiver trajectory. A solve that stops at the iteration
/// limit is returned with `report.converged == false`.
pub fn estimate(
    observations: &[PseudorangeObservation],
    options: &EstimatorOptions,
    solver: &SolverConfig,
    robust: &RobustConfig,
) -> Result<Estimate, EstimateError> {
    let (mut graph, epochs) = build_graph(observations, options)?;
    robust.validate()?;
    if robust.scheme == Scheme::SwitchConstraints {
        graph = augment_with_switches(graph, robust)?;
    }
    let report = solve_lm(&graph, solver, robust)?;

    let mut switch_sums = vec![(0.0, 0usize); epochs.len()];
    for (key, value) in report.values.iter() {
        if key.kind == VariableKind::Switch {
            let cell = &mut switch_sums[key.epoch_index];
            cell.0 += switch_function(value[0]).0;
            cell.1 += 1;
        }
    }
    let epochs = epochs
        .into_iter()
        .enumerate()
        .map(|(k, (t, n_sats))| {
            let state = report.values.state(k).expect("every epoch has a state");
            let mean_switch = (robust.scheme == Scheme::SwitchConstraints).then(|| {
                let (sum, n) = switch_sums[k];
                if n == 0 {
                    f64::NAN
                } else {
                    sum / n as f64
                }
            });
            EpochEstimate {
                t,
                state,
                n_sats,
                mean_switch,
            }
        })
        .collect();
    Ok(Estimate { epochs, report })
}

impl From<GnssError> for EstimateError {
    fn from(e: GnssError) -> Self {
        Self::Graph(e.into())
    }
}
