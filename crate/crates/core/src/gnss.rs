//! Pseudorange measurement model.
//!
//! Clock biases are stored pre-multiplied by the speed of light, so every
//! state and correction term is in meters. Local "up" is the geocentric
//! radial direction of the receiver.

use nalgebra::{RowVector5, Vector3, Vector5};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// GPS L1 carrier frequency.
pub const GPS_L1_HZ: f64 = 1575.42e6;
/// GPS L2 carrier frequency.
pub const GPS_L2_HZ: f64 = 1227.60e6;

/// Dimension of [`EpochState`] as a tangent vector: position, clock, tropo.
pub const STATE_DIM: usize = 5;

/// Receivers closer than this to the geocenter have no usable local up.
const MIN_UP_RADIUS: f64 = 1.0e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GnssError {
    #[error("L1 and L2 frequencies must differ (both {0} Hz)")]
    EqualFrequencies(f64),
    #[error("carrier frequencies must be positive")]
    NonPositiveFrequency,
    #[error("receiver and satellite positions coincide")]
    CoincidentPositions,
    #[error("local up is undefined for a receiver {0:.1} m from the geocenter")]
    UndefinedUp(f64),
    #[error("elevation {0} rad is outside (0, pi/2]")]
    ElevationOutOfRange(f64),
    #[error("satellite {sat} at {elevation_deg:.3} deg is below the {mask_deg} deg elevation mask")]
    BelowElevationMask {
        sat: String,
        elevation_deg: f64,
        mask_deg: f64,
    },
    #[error("pseudorange sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
}

/// Per-epoch receiver state: ECEF position, clock bias and zenith delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochState {
    pub position: Vector3<f64>,
    /// Receiver clock bias times c, meters.
    pub clock_bias: f64,
    /// Zenith troposphere delay, meters.
    pub zenith_tropo: f64,
}

impl EpochState {
    pub fn new(position: Vector3<f64>, clock_bias: f64, zenith_tropo: f64) -> Self {
        Self {
            position,
            clock_bias,
            zenith_tropo,
        }
    }

    pub fn to_vector(&self) -> Vector5<f64> {
        Vector5::new(
            self.position.x,
            self.position.y,
            self.position.z,
            self.clock_bias,
            self.zenith_tropo,
        )
    }

    /// Builds a state from a 5-element slice; panics on other lengths.
    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), STATE_DIM, "epoch state has {STATE_DIM} components");
        Self::new(Vector3::new(v[0], v[1], v[2]), v[3], v[4])
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }
}

/// A state stamped with its epoch time (seconds of week).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedState {
    pub t: f64,
    pub state: EpochState,
}

/// Everything known about the transmitting satellite at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteContext {
    pub sat_id: String,
    pub position: Vector3<f64>,
    /// Satellite clock bias times c, meters.
    pub clock_bias: f64,
    pub rel_correction: f64,
    pub phase_center: f64,
    pub dcb: f64,
}

impl SatelliteContext {
    pub fn new(sat_id: impl Into<String>, position: Vector3<f64>) -> Self {
        Self {
            sat_id: sat_id.into(),
            position,
            clock_bias: 0.0,
            rel_correction: 0.0,
            phase_center: 0.0,
            dcb: 0.0,
        }
    }

    /// Sum of the additive relativistic, phase-center and code-bias terms.
    pub fn corrections(&self) -> f64 {
        self.rel_correction + self.phase_center + self.dcb
    }

    /// Flags orbit radii outside the GNSS band; returns whether it looks sane.
    pub fn check_orbit(&self) -> bool {
        let r = self.position.norm();
        let ok = (2.0e7..3.0e7).contains(&r);
        if !ok {
            log::warn!("satellite {} orbit radius {r:.0} m outside (2e7, 3e7)", self.sat_id);
        }
        ok
    }
}

/// One ionosphere-free pseudorange with its satellite context.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudorangeObservation {
    pub epoch: f64,
    pub sat: SatelliteContext,
    pub rho_if: f64,
    pub sigma: f64,
}

/// Raw dual-frequency code observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DualFreqObservation {
    pub epoch: f64,
    pub sat_id: String,
    pub rho_l1: f64,
    pub rho_l2: f64,
    pub f1: f64,
    pub f2: f64,
}

impl DualFreqObservation {
    pub fn gps(epoch: f64, sat_id: impl Into<String>, rho_l1: f64, rho_l2: f64) -> Self {
        Self {
            epoch,
            sat_id: sat_id.into(),
            rho_l1,
            rho_l2,
            f1: GPS_L1_HZ,
            f2: GPS_L2_HZ,
        }
    }
}

/// Coefficients `(f1²/(f1²−f2²), f2²/(f1²−f2²))` of the ionosphere-free
/// combination.
pub fn iono_free_coefficients(f1: f64, f2: f64) -> Result<(f64, f64), GnssError> {
    if f1 <= 0.0 || f2 <= 0.0 {
        return Err(GnssError::NonPositiveFrequency);
    }
    if f1 == f2 {
        return Err(GnssError::EqualFrequencies(f1));
    }
    let (f1sq, f2sq) = (f1 * f1, f2 * f2);
    let denom = f1sq - f2sq;
    Ok((f1sq / denom, f2sq / denom))
}

/// Ionosphere-free pseudorange, cancelling the first-order dispersive delay.
pub fn iono_free(obs: &DualFreqObservation) -> Result<f64, GnssError> {
    for rho in [obs.rho_l1, obs.rho_l2] {
        if !(1.0e6..1.0e8).contains(&rho) {
            log::warn!("{} pseudorange {rho} m outside the (1e6, 1e8) sanity band", obs.sat_id);
        }
    }
    let (c1, c2) = iono_free_coefficients(obs.f1, obs.f2)?;
    Ok(obs.rho_l1 * c1 - obs.rho_l2 * c2)
}

/// Elevation of `sat_pos` above the geocentric horizon of `user_pos`.
pub fn elevation_angle(user_pos: &Vector3<f64>, sat_pos: &Vector3<f64>) -> Result<f64, GnssError> {
    let radius = user_pos.norm();
    if radius <= MIN_UP_RADIUS {
        return Err(GnssError::UndefinedUp(radius));
    }
    let los = sat_pos - user_pos;
    let range = los.norm();
    if range == 0.0 {
        return Err(GnssError::CoincidentPositions);
    }
    let sin_el = (user_pos / radius).dot(&(los / range));
    Ok(sin_el.clamp(-1.0, 1.0).asin())
}

/// Troposphere mapping function from zenith to slant delay.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingFunction {
    /// `1.001 / sqrt(0.002001 + sin²(el))`, bounded at the horizon.
    #[default]
    BlackEisner,
    /// `1 / sin(el)`.
    Cosecant,
}

impl MappingFunction {
    pub fn evaluate(self, elevation: f64) -> Result<f64, GnssError> {
        if !(elevation > 0.0 && elevation <= std::f64::consts::FRAC_PI_2) {
            return Err(GnssError::ElevationOutOfRange(elevation));
        }
        let s = elevation.sin();
        Ok(match self {
            MappingFunction::BlackEisner => 1.001 / (0.002001 + s * s).sqrt(),
            MappingFunction::Cosecant => 1.0 / s,
        })
    }
}

/// Default-mapping shorthand.
pub fn tropo_mapping(elevation: f64) -> Result<f64, GnssError> {
    MappingFunction::BlackEisner.evaluate(elevation)
}

/// Mapping function plus the admission mask applied before prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudorangeModel {
    pub mapping: MappingFunction,
    /// `None` disables the mask (used inside the optimizer, where admission
    /// has already happened).
    pub elevation_mask_deg: Option<f64>,
}

impl Default for PseudorangeModel {
    fn default() -> Self {
        Self {
            mapping: MappingFunction::BlackEisner,
            elevation_mask_deg: Some(10.0),
        }
    }
}

impl PseudorangeModel {
    pub fn unmasked(mapping: MappingFunction) -> Self {
        Self {
            mapping,
            elevation_mask_deg: None,
        }
    }

    /// Elevation and mapping value, enforcing the mask.
    fn mapping_for(&self, state: &EpochState, sat: &SatelliteContext) -> Result<f64, GnssError> {
        let el = elevation_angle(&state.position, &sat.position)?;
        if let Some(mask) = self.elevation_mask_deg {
            if el.to_degrees() < mask {
                return Err(GnssError::BelowElevationMask {
                    sat: sat.sat_id.clone(),
                    elevation_deg: el.to_degrees(),
                    mask_deg: mask,
                });
            }
        }
        self.mapping.evaluate(el)
    }
}

/// Predicted ionosphere-free pseudorange with a caller-supplied mapping
/// value. Geometry only: no elevation is computed.
pub fn predict_pseudorange_with_mapping(
    state: &EpochState,
    sat: &SatelliteContext,
    mapping_value: f64,
) -> Result<f64, GnssError> {
    let range = (state.position - sat.position).norm();
    if range == 0.0 {
        return Err(GnssError::CoincidentPositions);
    }
    Ok(range + state.clock_bias - sat.clock_bias
        + state.zenith_tropo * mapping_value
        + sat.corrections())
}

/// Predicted ionosphere-free pseudorange.
pub fn predict_pseudorange(
    state: &EpochState,
    sat: &SatelliteContext,
    model: &PseudorangeModel,
) -> Result<f64, GnssError> {
    let m = model.mapping_for(state, sat)?;
    predict_pseudorange_with_mapping(state, sat, m)
}

/// Jacobian row of the prediction with a caller-supplied mapping value.
pub fn pseudorange_jacobian_with_mapping(
    state: &EpochState,
    sat: &SatelliteContext,
    mapping_value: f64,
) -> Result<RowVector5<f64>, GnssError> {
    let diff = state.position - sat.position;
    let range = diff.norm();
    if range == 0.0 {
        return Err(GnssError::CoincidentPositions);
    }
    let u = diff / range;
    Ok(RowVector5::new(u.x, u.y, u.z, 1.0, mapping_value))
}

/// Jacobian row of the prediction with respect to
/// `(x, y, z, clock_bias, zenith_tropo)`. The dependence of the mapping
/// value on position is neglected.
pub fn pseudorange_jacobian(
    state: &EpochState,
    sat: &SatelliteContext,
    model: &PseudorangeModel,
) -> Result<RowVector5<f64>, GnssError> {
    let m = model.mapping_for(state, sat)?;
    pseudorange_jacobian_with_mapping(state, sat, m)
}

/// Prediction and Jacobian in one pass.
pub fn linearize_pseudorange(
    state: &EpochState,
    sat: &SatelliteContext,
    model: &PseudorangeModel,
) -> Result<(f64, RowVector5<f64>), GnssError> {
    let m = model.mapping_for(state, sat)?;
    Ok((
        predict_pseudorange_with_mapping(state, sat, m)?,
        pseudorange_jacobian_with_mapping(state, sat, m)?,
    ))
}

/// `(rho_if − predicted) / sigma`; its square is the factor cost.
pub fn pseudorange_whitened_error(
    state: &EpochState,
    obs: &PseudorangeObservation,
    model: &PseudorangeModel,
) -> Result<f64, GnssError> {
    if !(obs.sigma > 0.0) {
        return Err(GnssError::NonPositiveSigma(obs.sigma));
    }
    let predicted = predict_pseudorange(state, &obs.sat, model)?;
    Ok((obs.rho_if - predicted) / obs.sigma)
}
