//! RSOS error statistics and the Monte-Carlo fault-percentage sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimator::{estimate, EstimatorOptions};
use crate::gnss::{PseudorangeObservation, TimedState};
use crate::graph::solver::SolverConfig;
use crate::rng::derive_seed;
use crate::robust::{RobustConfig, Scheme};
use crate::sim::{
    generate_truth, inject_faults, synthesize_observations, validate_probability, FaultSpec,
    ScenarioSpec, SimError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("epoch grids differ at index {index}")]
    EpochMismatch { index: usize },
    #[error("series is empty")]
    EmptySeries,
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Per-epoch 3-D position error norm.
pub fn rsos_series(estimate: &[TimedState], truth: &[TimedState]) -> Result<Vec<f64>, EvalError> {
    if estimate.len() != truth.len() {
        return Err(EvalError::EpochMismatch {
            index: estimate.len().min(truth.len()),
        });
    }
    estimate
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(index, (e, t))| {
            if e.t != t.t {
                return Err(EvalError::EpochMismatch { index });
            }
            Ok((e.state.position - t.state.position).norm())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub median: f64,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

pub fn error_stats(series: &[f64]) -> Result<ErrorStats, EvalError> {
    let median = median(series).ok_or(EvalError::EmptySeries)?;
    Ok(ErrorStats {
        median,
        mean: series.iter().sum::<f64>() / series.len() as f64,
        max: series.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        count: series.len(),
    })
}

/// Everything a sweep needs. `robust.scheme` is ignored in favour of
/// `schemes`; the scenario and fault seeds are replaced per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSetup {
    pub scenario: ScenarioSpec,
    pub sigma_fault: f64,
    pub schemes: Vec<Scheme>,
    pub p_grid: Vec<f64>,
    pub trials: usize,
    pub base_seed: u64,
    pub robust: RobustConfig,
    pub solver: SolverConfig,
    pub estimator: EstimatorOptions,
}

impl SweepSetup {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.trials == 0 {
            return Err(EvalError::InvalidSweep("trials must be at least 1".into()));
        }
        if self.schemes.is_empty() || self.p_grid.is_empty() {
            return Err(EvalError::InvalidSweep("schemes and p_grid must be non-empty".into()));
        }
        for &p in &self.p_grid {
            validate_probability(p)?;
        }
        FaultSpec {
            probability: 0.0,
            sigma_fault: self.sigma_fault,
            seed: 0,
        }
        .validate()?;
        self.scenario.validate()?;
        Ok(())
    }

    /// Seed of trial `i`; the same for every fault probability and scheme.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        derive_seed(self.base_seed, trial as u64, 0)
    }
}

/// Statistics of one scheme at one fault probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub p: f64,
    /// Median of per-trial medians, mean of per-trial means, overall max;
    /// `None` if every trial diverged.
    pub stats: Option<ErrorStats>,
    pub trial_medians: Vec<Option<f64>>,
    pub trial_means: Vec<Option<f64>>,
    pub divergences: usize,
    /// SHA-256 of the faulted observations each trial consumed.
    pub data_digests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub scheme: Scheme,
    pub fault_probabilities: Vec<f64>,
    pub cells: Vec<SweepCell>,
    pub trials: usize,
    pub seeds: Vec<u64>,
}

/// Completion notice for one `(p, trial)` data set.
#[derive(Debug, Clone, Copy)]
pub struct CellProgress {
    pub p: f64,
    pub trial: usize,
    pub completed: usize,
    pub total: usize,
}

/// Hash of the fields an estimator reads from each observation.
pub fn observation_digest(observations: &[PseudorangeObservation]) -> String {
    let mut h = Sha256::new();
    for o in observations {
        h.update(o.epoch.to_bits().to_le_bytes());
        h.update((o.sat.sat_id.len() as u64).to_le_bytes());
        h.update(o.sat.sat_id.as_bytes());
        for v in [
            o.sat.position.x,
            o.sat.position.y,
            o.sat.position.z,
            o.sat.clock_bias,
            o.sat.rel_correction,
            o.sat.phase_center,
            o.sat.dcb,
            o.rho_if,
            o.sigma,
        ] {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct TrialOutcome {
    digest: String,
    /// Per scheme: `(median, mean, max, count)` or `None` on divergence.
    per_scheme: Vec<Option<ErrorStats>>,
}

fn run_trial(setup: &SweepSetup, p: f64, trial: usize) -> Result<TrialOutcome, EvalError> {
    let seed = setup.trial_seed(trial);
    let scenario = ScenarioSpec {
        seed,
        ..setup.scenario.clone()
    };
    let truth = generate_truth(&scenario)?;
    let clean = synthesize_observations(&truth, &scenario)?;
    let fault = FaultSpec {
        probability: p,
        sigma_fault: setup.sigma_fault,
        seed: derive_seed(seed, 1, 0),
    };
    let faulted = inject_faults(&clean, &fault)?;
    let digest = observation_digest(&faulted.observations);
    let per_scheme = setup
        .schemes
        .iter()
        .map(|&scheme| {
            let robust = RobustConfig {
                scheme,
                ..setup.robust.clone()
            };
            let result = estimate(&faulted.observations, &setup.estimator, &setup.solver, &robust);
            match result {
                Ok(est) if est.report.converged => rsos_series(&est.trajectory(), &truth)
                    .and_then(|s| error_stats(&s))
                    .ok(),
                Ok(_) => {
                    log::warn!("{scheme} p={p} trial {trial}: iteration limit reached");
                    None
                }
                Err(e) => {
                    log::warn!("{scheme} p={p} trial {trial}: {e}");
                    None
                }
            }
        })
        .collect();
    Ok(TrialOutcome { digest, per_scheme })
}

/// Runs every scheme on every `(p, trial)` data set.
///
/// Data sets are generated once and shared by all schemes. Cells run in
/// parallel on the current rayon pool; results do not depend on the
/// completion order.
pub fn fault_sweep(setup: &SweepSetup) -> Result<Vec<SweepResult>, EvalError> {
    fault_sweep_with_progress(setup, &|_| {})
}

pub fn fault_sweep_with_progress(
    setup: &SweepSetup,
    progress: &(dyn Fn(CellProgress) + Sync),
) -> Result<Vec<SweepResult>, EvalError> {
    setup.validate()?;
    let cells: Vec<(usize, usize)> = (0..setup.p_grid.len())
        .flat_map(|pi| (0..setup.trials).map(move |t| (pi, t)))
        .collect();
    let total = cells.len();
    let completed = std::sync::atomic::AtomicUsize::new(0);
    let outcomes: Vec<TrialOutcome> = cells
        .par_iter()
        .map(|&(pi, trial)| {
            let p = setup.p_grid[pi];
            let out = run_trial(setup, p, trial)?;
            let done = completed.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            progress(CellProgress {
                p,
                trial,
                completed: done,
                total,
            });
            Ok(out)
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(aggregate(setup, &outcomes))
}

/// `outcomes` is indexed `p_index * trials + trial`.
fn aggregate(setup: &SweepSetup, outcomes: &[TrialOutcome]) -> Vec<SweepResult> {
    let seeds: Vec<u64> = (0..setup.trials).map(|t| setup.trial_seed(t)).collect();
    setup
        .schemes
        .iter()
        .enumerate()
        .map(|(si, &scheme)| {
            let cells = setup
                .p_grid
                .iter()
                .enumerate()
                .map(|(pi, &p)| {
                    let trials = &outcomes[pi * setup.trials..(pi + 1) * setup.trials];
                    let stats: Vec<Option<ErrorStats>> = trials.iter().map(|o| o.per_scheme[si]).collect();
                    let ok: Vec<ErrorStats> = stats.iter().flatten().copied().collect();
                    let medians: Vec<f64> = ok.iter().map(|s| s.median).collect();
                    let aggregate = median(&medians).map(|m| ErrorStats {
                        median: m,
                        mean: ok.iter().map(|s| s.mean).sum::<f64>() / ok.len() as f64,
                        max: ok.iter().map(|s| s.max).fold(f64::NEG_INFINITY, f64::max),
                        count: ok.iter().map(|s| s.count).sum(),
                    });
                    SweepCell {
                        p,
                        stats: aggregate,
                        trial_medians: stats.iter().map(|s| s.map(|s| s.median)).collect(),
                        trial_means: stats.iter().map(|s| s.map(|s| s.mean)).collect(),
                        divergences: stats.iter().filter(|s| s.is_none()).count(),
                        data_digests: trials.iter().map(|o| o.digest.clone()).collect(),
                    }
                })
                .collect();
            SweepResult {
                scheme,
                fault_probabilities: setup.p_grid.clone(),
                cells,
                trials: setup.trials,
                seeds: seeds.clone(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnss::EpochState;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn at(t: f64, x: f64, y: f64, z: f64) -> TimedState {
        TimedState {
            t,
            state: EpochState::new(Vector3::new(x, y, z), 0.0, 0.0),
        }
    }

    #[test]
    fn rsos_examples() {
        let truth = vec![at(0.0, 0.0, 0.0, 0.0), at(1.0, 0.0, 0.0, 0.0), at(2.0, 0.0, 0.0, 0.0)];
        assert_eq!(rsos_series(&truth, &truth).unwrap(), vec![0.0; 3]);
        let est = vec![at(0.0, 3.0, 4.0, 0.0), at(1.0, 1.0, 1.0, 1.0), at(2.0, 0.0, 0.0, 0.0)];
        let s = rsos_series(&est, &truth).unwrap();
        assert_eq!(s[0], 5.0);
        assert_relative_eq!(s[1], 3f64.sqrt());
        let shifted = vec![at(0.0, 0.0, 0.0, 0.0), at(1.5, 0.0, 0.0, 0.0), at(2.0, 0.0, 0.0, 0.0)];
        assert_eq!(rsos_series(&shifted, &truth), Err(EvalError::EpochMismatch { index: 1 }));
    }

    #[test]
    fn stats_examples() {
        let s = error_stats(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.median, s.mean, s.max, s.count), (2.0, 2.0, 3.0, 3));
        let s = error_stats(&[1.0, 2.0, 3.0, 100.0]).unwrap();
        assert_eq!((s.median, s.mean, s.max), (2.5, 26.5, 100.0));
        let s = error_stats(&[5.0]).unwrap();
        assert_eq!((s.median, s.mean, s.max), (5.0, 5.0, 5.0));
        assert_eq!(error_stats(&[]), Err(EvalError::EmptySeries));
    }
}
