use proptest::prelude::*;
use robustgnss::gnss::predict_pseudorange;
use robustgnss::sim::{generate_truth, inject_faults, synthesize_observations};
use robustgnss::{FaultSpec, PseudorangeObservation, ScenarioSpec};

fn spec(duration: f64, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        duration,
        seed,
        ..ScenarioSpec::default()
    }
}

fn simulate(spec: &ScenarioSpec) -> Vec<PseudorangeObservation> {
    let truth = generate_truth(spec).unwrap();
    synthesize_observations(&truth, spec).unwrap()
}

fn sample_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn noise_has_configured_spread() {
    let spec = spec(100.0, 11);
    let truth = generate_truth(&spec).unwrap();
    let obs = simulate(&spec);
    assert_eq!(obs.len(), 800);
    let model = spec.model();
    let residuals: Vec<f64> = obs
        .iter()
        .map(|o| {
            let k = truth.iter().position(|s| s.t == o.epoch).unwrap();
            o.rho_if - predict_pseudorange(&truth[k].state, &o.sat, &model).unwrap()
        })
        .collect();
    let std = sample_std(&residuals);
    assert!((0.9..=1.1).contains(&std), "std {std}");
    assert!(obs.iter().all(|o| o.sigma == 1.0));
}

#[test]
fn same_seed_same_bits() {
    let a = simulate(&spec(30.0, 5));
    let b = simulate(&spec(30.0, 5));
    assert_eq!(a, b);
    let c = simulate(&spec(30.0, 6));
    assert_ne!(a, c);
    let fault = FaultSpec {
        probability: 0.3,
        ..FaultSpec::default()
    };
    assert_eq!(inject_faults(&a, &fault).unwrap(), inject_faults(&b, &fault).unwrap());
}

/// 1250 epochs of 8 satellites.
fn ten_thousand() -> Vec<PseudorangeObservation> {
    let obs = simulate(&spec(1250.0, 3));
    assert_eq!(obs.len(), 10_000);
    obs
}

#[test]
fn fault_count_and_spread() {
    let obs = ten_thousand();
    let faulted = inject_faults(
        &obs,
        &FaultSpec {
            probability: 0.3,
            sigma_fault: 50.0,
            seed: 17,
        },
    )
    .unwrap();
    let count = faulted.fault_count();
    assert!((2854..=3148).contains(&count), "count {count}");
    let offsets: Vec<f64> = faulted
        .mask
        .iter()
        .zip(&faulted.offsets)
        .filter(|(m, _)| **m)
        .map(|(_, d)| *d)
        .collect();
    let std = sample_std(&offsets);
    assert!((47.4..=52.6).contains(&std), "std {std}");
    for ((before, after), (m, d)) in obs.iter().zip(&faulted.observations).zip(faulted.mask.iter().zip(&faulted.offsets)) {
        assert_eq!(after.sigma, before.sigma);
        if *m {
            assert_eq!(after.rho_if, before.rho_if + d);
        } else {
            assert_eq!(after, before);
        }
    }
}

#[test]
fn fault_events_are_independent_across_satellite_pairs() {
    let spec = ScenarioSpec {
        duration: 10_000.0,
        noise_sigma: 0.0,
        ..ScenarioSpec::default()
    };
    let obs = simulate(&spec);
    let faulted = inject_faults(
        &obs,
        &FaultSpec {
            probability: 0.3,
            seed: 8,
            ..FaultSpec::default()
        },
    )
    .unwrap();
    let n_sats = 8;
    assert_eq!(obs.len(), 10_000 * n_sats);
    // 2x2 contingency tables per satellite pair, one cell per epoch.
    for a in 0..n_sats {
        for b in (a + 1)..n_sats {
            let mut table = [[0.0f64; 2]; 2];
            for epoch in faulted.mask.chunks(n_sats) {
                table[usize::from(epoch[a])][usize::from(epoch[b])] += 1.0;
            }
            let n: f64 = table.iter().flatten().sum();
            let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
            let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
            let mut chi2 = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let expected = rows[i] * cols[j] / n;
                    chi2 += (table[i][j] - expected).powi(2) / expected;
                }
            }
            // Upper 0.1% point of chi-square with one degree of freedom.
            assert!(chi2 < 10.828, "pair ({a}, {b}): chi2 {chi2}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fault_sets_nest_as_probability_grows(seed in any::<u64>(), p1 in 0.0f64..0.49, p2 in 0.0f64..0.49) {
        let obs = simulate(&spec(20.0, 1));
        let (lo, hi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
        let fault = |p| FaultSpec { probability: p, sigma_fault: 50.0, seed };
        let a = inject_faults(&obs, &fault(lo)).unwrap();
        let b = inject_faults(&obs, &fault(hi)).unwrap();
        for i in 0..obs.len() {
            prop_assert!(!a.mask[i] || b.mask[i]);
            if a.mask[i] {
                prop_assert_eq!(a.offsets[i], b.offsets[i]);
            }
        }
    }

    #[test]
    fn truth_grid_matches_duration_and_rate(duration in 1.0f64..50.0, rate in 0.5f64..4.0) {
        let s = ScenarioSpec { duration, rate, ..ScenarioSpec::default() };
        prop_assume!(s.epoch_count() > 0);
        let truth = generate_truth(&s).unwrap();
        prop_assert_eq!(truth.len(), (duration * rate).round() as usize);
        for w in truth.windows(2) {
            prop_assert!((w[1].t - w[0].t - 1.0 / rate).abs() < 1e-9);
            prop_assert_eq!(w[0].state.zenith_tropo, s.true_zenith_tropo);
        }
    }
}

#[test]
fn invalid_specs_rejected() {
    for bad in [
        ScenarioSpec { rate: 0.0, ..ScenarioSpec::default() },
        ScenarioSpec { duration: -1.0, ..ScenarioSpec::default() },
        ScenarioSpec { noise_sigma: -0.1, ..ScenarioSpec::default() },
    ] {
        assert!(generate_truth(&bad).is_err());
    }
    let obs = simulate(&spec(2.0, 1));
    for p in [-0.1, 0.5, 0.6] {
        let fault = FaultSpec { probability: p, ..FaultSpec::default() };
        assert!(inject_faults(&obs, &fault).is_err(), "p = {p}");
    }
    let fault = FaultSpec { sigma_fault: 0.0, ..FaultSpec::default() };
    assert!(inject_faults(&obs, &fault).is_err());
}
