use nalgebra::{DVector, Vector3};
use proptest::prelude::*;
use robustgnss::gnss::{
    elevation_angle, iono_free, iono_free_coefficients, predict_pseudorange, pseudorange_jacobian,
    pseudorange_whitened_error, DualFreqObservation, GPS_L1_HZ, GPS_L2_HZ,
};
use robustgnss::{
    EpochState, Factor, MappingFunction, PseudorangeModel, PseudorangeObservation, SatelliteContext, Values,
    VariableKey,
};

const EARTH_RADIUS: f64 = 6378137.0;
const ORBIT_RADIUS: f64 = 26_560_000.0;

/// Receiver near the surface at the given latitude/longitude and a
/// satellite on the orbit sphere at the given azimuth/elevation.
fn geometry(lat: f64, lon: f64, height: f64, az: f64, el: f64) -> (Vector3<f64>, Vector3<f64>) {
    let up = Vector3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin());
    let east = Vector3::new(-lon.sin(), lon.cos(), 0.0);
    let north = up.cross(&east);
    let user = up * (EARTH_RADIUS + height);
    let dir = (north * az.cos() + east * az.sin()) * el.cos() + up * el.sin();
    // Distance along `dir` that reaches the orbit sphere.
    let b = user.dot(&dir);
    let range = -b + (b * b - user.norm_squared() + ORBIT_RADIUS * ORBIT_RADIUS).sqrt();
    (user, user + dir * range)
}

fn sat(position: Vector3<f64>) -> SatelliteContext {
    SatelliteContext::new("G01", position)
}

#[test]
fn iono_free_examples() {
    let (c1, c2) = iono_free_coefficients(GPS_L1_HZ, GPS_L2_HZ).unwrap();
    assert!((c1 - 2.5457).abs() < 5e-5 && (c2 - 1.5457).abs() < 5e-5);
    assert_eq!(c1 - c2, 1.0);
    let r = 2.2e7;
    assert_eq!(iono_free(&DualFreqObservation::gps(0.0, "G01", r, r)).unwrap(), r);
    let same = DualFreqObservation {
        f2: GPS_L1_HZ,
        ..DualFreqObservation::gps(0.0, "G01", r, r)
    };
    assert!(iono_free(&same).is_err());
}

#[test]
fn predict_examples_bypassing_mask() {
    let mut model = PseudorangeModel::unmasked(MappingFunction::BlackEisner);
    model.elevation_mask_deg = None;
    let user = EpochState::new(Vector3::new(EARTH_RADIUS, 0.0, 0.0), 0.0, 0.0);
    let above = sat(Vector3::new(EARTH_RADIUS + 2.0e7, 0.0, 0.0));
    assert_eq!(predict_pseudorange(&user, &above, &model).unwrap(), 2.0e7);
    // Tropo enters through the mapping value at zenith.
    let wet = EpochState::new(user.position, 1.0, 0.1);
    let mut s = above.clone();
    s.clock_bias = 2.0;
    let zenith = MappingFunction::BlackEisner.evaluate(std::f64::consts::FRAC_PI_2).unwrap();
    let got = predict_pseudorange(&wet, &s, &model).unwrap();
    assert!((got - (2.0e7 + 1.0 - 2.0 + 0.1 * zenith)).abs() < 1e-7);
    s.rel_correction = 0.5;
    s.phase_center = -0.2;
    s.dcb = 0.1;
    let shifted = predict_pseudorange(&wet, &s, &model).unwrap();
    assert!((shifted - got - 0.4).abs() < 1e-7);
}

#[test]
fn mask_rejects_low_satellites() {
    let (user, low) = geometry(0.3, 0.2, 0.0, 1.0, 5f64.to_radians());
    let state = EpochState::new(user, 0.0, 2.0);
    let model = PseudorangeModel::default();
    assert!(predict_pseudorange(&state, &sat(low), &model).is_err());
    assert!(pseudorange_jacobian(&state, &sat(low), &model).is_err());
}

#[test]
fn whitened_error_agrees_with_factor() {
    let (user, s) = geometry(0.7, -1.4, 120.0, 2.0, 0.6);
    let state = EpochState::new(user, 50.0, 2.3);
    let model = PseudorangeModel::unmasked(MappingFunction::BlackEisner);
    let clean = predict_pseudorange(&state, &sat(s), &model).unwrap();
    let obs = PseudorangeObservation {
        epoch: 0.0,
        sat: sat(s),
        rho_if: clean + 3.0,
        sigma: 1.5,
    };
    let e = pseudorange_whitened_error(&state, &obs, &model).unwrap();
    assert!((e - 2.0).abs() < 1e-6);
    let factor = Factor::pseudorange(VariableKey::state(0), obs, MappingFunction::BlackEisner).unwrap();
    let mut values = Values::new();
    values.insert(VariableKey::state(0), DVector::from_column_slice(state.to_vector().as_slice()));
    let r = factor.whitened_residual(&values).unwrap();
    assert!((r.norm_squared() - e * e).abs() < 1e-12 * (e * e));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn iono_delay_cancels(range in 2.0e7f64..2.6e7, scale in 0.0f64..100.0) {
        // Delay pattern ∝ 1/f², scaled so the L1 delay spans 0-100 m.
        let i = scale * GPS_L1_HZ * GPS_L1_HZ;
        let obs = DualFreqObservation::gps(
            0.0,
            "G01",
            range + i / (GPS_L1_HZ * GPS_L1_HZ),
            range + i / (GPS_L2_HZ * GPS_L2_HZ),
        );
        let rho = iono_free(&obs).unwrap();
        prop_assert!((rho - range).abs() <= 1e-9 * range);
    }

    #[test]
    fn jacobian_matches_central_differences(
        lat in -1.4f64..1.4,
        lon in -3.1f64..3.1,
        height in -100.0f64..3000.0,
        az in 0.0f64..6.28,
        el in 0.27f64..1.57,
        clock in -1e5f64..1e5,
        // Physical zenith delays stay below ~2.7 m; the neglected mapping
        // slope scales with this value.
        tropo in 0.0f64..3.0,
    ) {
        let (user, s) = geometry(lat, lon, height, az, el);
        let state = EpochState::new(user, clock, tropo);
        let model = PseudorangeModel::unmasked(MappingFunction::BlackEisner);
        let sat = sat(s);
        let j = pseudorange_jacobian(&state, &sat, &model).unwrap();
        let x = state.to_vector();
        let mut worst = 0.0f64;
        for c in 0..5 {
            // Metre-scale step: smaller steps drown in the ~1e-8 m rounding
            // of a 2e7 m range.
            let h = 0.5;
            let mut plus = x;
            let mut minus = x;
            plus[c] += h;
            minus[c] -= h;
            let f = |v: nalgebra::Vector5<f64>| {
                predict_pseudorange(&EpochState::from_slice(v.as_slice()), &sat, &model).unwrap()
            };
            let fd = (f(plus) - f(minus)) / (2.0 * h);
            worst = worst.max((fd - j[c]).abs() / j[c].abs().max(1.0));
        }
        prop_assert!(worst < 1e-5, "relative error {}", worst);
    }

    #[test]
    fn clock_aliases_range(
        lat in -1.4f64..1.4,
        lon in -3.1f64..3.1,
        az in 0.0f64..6.28,
        el in 0.27f64..1.57,
        delta in -1e4f64..1e4,
        offset in -10.0f64..10.0,
    ) {
        let (user, s) = geometry(lat, lon, 0.0, az, el);
        let model = PseudorangeModel::unmasked(MappingFunction::BlackEisner);
        let state = EpochState::new(user, 10.0, 2.4);
        let clean = predict_pseudorange(&state, &sat(s), &model).unwrap();
        let obs = PseudorangeObservation { epoch: 0.0, sat: sat(s), rho_if: clean + offset, sigma: 2.0 };
        let shifted_state = EpochState::new(user, 10.0 + delta, 2.4);
        let shifted_obs = PseudorangeObservation { rho_if: obs.rho_if + delta, ..obs.clone() };
        let a = pseudorange_whitened_error(&state, &obs, &model).unwrap();
        let b = pseudorange_whitened_error(&shifted_state, &shifted_obs, &model).unwrap();
        prop_assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn elevation_of_constructed_geometry(
        lat in -1.4f64..1.4,
        lon in -3.1f64..3.1,
        az in 0.0f64..6.28,
        el in 0.01f64..1.57,
    ) {
        let (user, s) = geometry(lat, lon, 0.0, az, el);
        prop_assert!((elevation_angle(&user, &s).unwrap() - el).abs() < 1e-9);
    }

    #[test]
    fn mapping_decreases_with_elevation(a in 0.001f64..1.5707, b in 0.001f64..1.5707) {
        prop_assume!(a != b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        for m in [MappingFunction::BlackEisner, MappingFunction::Cosecant] {
            prop_assert!(m.evaluate(lo).unwrap() > m.evaluate(hi).unwrap());
        }
    }
}
