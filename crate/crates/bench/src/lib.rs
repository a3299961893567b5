//! Fixtures shared by the benchmarks.

use robustgnss::estimator::build_graph;
use robustgnss::sim::{generate_truth, inject_faults, synthesize_observations};
use robustgnss::{EstimatorOptions, FactorGraph, FaultSpec, PseudorangeObservation, ScenarioSpec};

/// Observations for a static receiver, `epochs` seconds at 1 Hz, with a
/// fraction `p` of them faulted.
pub fn observations(epochs: usize, p: f64) -> Vec<PseudorangeObservation> {
    let spec = ScenarioSpec {
        duration: epochs as f64,
        ..ScenarioSpec::default()
    };
    let truth = generate_truth(&spec).expect("valid scenario");
    let obs = synthesize_observations(&truth, &spec).expect("valid scenario");
    let fault = FaultSpec {
        probability: p,
        ..FaultSpec::default()
    };
    inject_faults(&obs, &fault).expect("valid fault spec").observations
}

pub fn graph(epochs: usize, p: f64) -> FactorGraph {
    build_graph(&observations(epochs, p), &EstimatorOptions::default())
        .expect("observable scenario")
        .0
}
