//! Synthetic scenarios: truth trajectories, clean pseudoranges generated
//! with the same measurement model the estimator inverts, and i.i.d.
//! per-observation fault injection.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnss::{
    elevation_angle, predict_pseudorange, EpochState, GnssError, MappingFunction,
    PseudorangeModel, PseudorangeObservation, SatelliteContext, TimedState,
};
use crate::rng::{stream, DOMAIN_CLOCK, DOMAIN_FAULT, DOMAIN_NOISE};

/// Highest admissible fault probability.
pub const MAX_FAULT_PROBABILITY: f64 = 0.49;
/// Nominal GPS orbit radius used to place satellites given by sky position.
pub const GPS_ORBIT_RADIUS: f64 = 26_560_000.0;
const EARTH_RADIUS: f64 = 6_378_137.0;
const MIN_VISIBLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("invalid fault specification: {0}")]
    InvalidFault(String),
    #[error("only {visible} satellites above the mask at t = {t}")]
    InsufficientVisibility { t: f64, visible: usize },
    #[error(transparent)]
    Gnss(#[from] GnssError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    Static {
        origin: [f64; 3],
    },
    ConstantVelocity {
        origin: [f64; 3],
        velocity: [f64; 3],
    },
    /// Piecewise-linear through `(t, position)` knots, held constant
    /// outside their span. Knot times are relative to the scenario start.
    Waypoints {
        points: Vec<Waypoint>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    pub position: [f64; 3],
}

impl Default for Trajectory {
    fn default() -> Self {
        Self::Static {
            origin: default_origin(),
        }
    }
}

/// A point on the equatorial-radius sphere at 39.65° N, 79.95° W.
fn default_origin() -> [f64; 3] {
    let (lat, lon) = (39.65f64.to_radians(), (-79.95f64).to_radians());
    [
        EARTH_RADIUS * lat.cos() * lon.cos(),
        EARTH_RADIUS * lat.cos() * lon.sin(),
        EARTH_RADIUS * lat.sin(),
    ]
}

impl Trajectory {
    fn validate(&self) -> Result<(), SimError> {
        let finite = |v: &[f64; 3]| v.iter().all(|x| x.is_finite());
        match self {
            Self::Static { origin } if finite(origin) => Ok(()),
            Self::ConstantVelocity { origin, velocity } if finite(origin) && finite(velocity) => {
                Ok(())
            }
            Self::Waypoints { points } => {
                if points.is_empty() {
                    return Err(SimError::InvalidSpec("waypoint list is empty".into()));
                }
                if points.iter().any(|p| !p.t.is_finite() || !finite(&p.position)) {
                    return Err(SimError::InvalidSpec("non-finite waypoint".into()));
                }
                if points.windows(2).any(|w| !(w[1].t > w[0].t)) {
                    return Err(SimError::InvalidSpec(
                        "waypoint times must be strictly increasing".into(),
                    ));
                }
                Ok(())
            }
            _ => Err(SimError::InvalidSpec("non-finite trajectory parameter".into())),
        }
    }

    /// Position at time `dt` after the scenario start.
    pub fn position(&self, dt: f64) -> Vector3<f64> {
        match self {
            Self::Static { origin } => Vector3::from(*origin),
            Self::ConstantVelocity { origin, velocity } => {
                Vector3::from(*origin) + dt * Vector3::from(*velocity)
            }
            Self::Waypoints { points } => {
                let first = &points[0];
                let last = &points[points.len() - 1];
                if dt <= first.t {
                    return Vector3::from(first.position);
                }
                if dt >= last.t {
                    return Vector3::from(last.position);
                }
                let i = points.partition_point(|p| p.t <= dt) - 1;
                let (a, b) = (&points[i], &points[i + 1]);
                let f = (dt - a.t) / (b.t - a.t);
                Vector3::from(a.position).lerp(&Vector3::from(b.position), f)
            }
        }
    }

    fn start_position(&self) -> Vector3<f64> {
        self.position(0.0)
    }
}

/// One satellite, either placed on the sky of the trajectory start or
/// given directly in ECEF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SatelliteSpec {
    Ecef(EcefSatellite),
    Sky(SkySatellite),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkySatellite {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    /// Slant range; by default the satellite sits on the nominal orbit sphere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<f64>,
    /// Satellite clock bias, meters.
    #[serde(default)]
    pub clock: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcefSatellite {
    pub id: String,
    pub position: [f64; 3],
    /// Linear drift, m/s.
    #[serde(default)]
    pub velocity: [f64; 3],
    #[serde(default)]
    pub clock: f64,
}

/// A satellite resolved to ECEF at the scenario start.
#[derive(Debug, Clone, PartialEq)]
struct ResolvedSatellite {
    id: String,
    position: Vector3<f64>,
    velocity: Vector3<f64>,
    clock: f64,
}

impl SatelliteSpec {
    fn resolve(&self, slot: usize, receiver: &Vector3<f64>) -> Result<ResolvedSatellite, SimError> {
        match self {
            Self::Ecef(s) => Ok(ResolvedSatellite {
                id: s.id.clone(),
                position: Vector3::from(s.position),
                velocity: Vector3::from(s.velocity),
                clock: s.clock,
            }),
            Self::Sky(s) => {
                let up = receiver.normalize();
                let east = Vector3::z().cross(&up);
                let east = if east.norm() > 0.0 { east.normalize() } else { Vector3::y() };
                let north = up.cross(&east);
                let (az, el) = (s.azimuth_deg.to_radians(), s.elevation_deg.to_radians());
                let los = el.cos() * az.sin() * east + el.cos() * az.cos() * north + el.sin() * up;
                let range = match s.range {
                    Some(r) if r > 0.0 => r,
                    Some(r) => return Err(SimError::InvalidSpec(format!("non-positive satellite range {r}"))),
                    None => {
                        let b = receiver.dot(&los);
                        let c = receiver.norm_squared() - GPS_ORBIT_RADIUS * GPS_ORBIT_RADIUS;
                        -b + (b * b - c).sqrt()
                    }
                };
                Ok(ResolvedSatellite {
                    id: s.id.clone().unwrap_or_else(|| format!("G{:02}", slot + 1)),
                    position: receiver + range * los,
                    velocity: Vector3::zeros(),
                    clock: s.clock,
                })
            }
        }
    }
}

fn default_constellation() -> Vec<SatelliteSpec> {
    [15.0, 25.0, 35.0, 50.0, 65.0, 30.0, 45.0, 75.0]
        .into_iter()
        .enumerate()
        .map(|(i, el)| {
            SatelliteSpec::Sky(SkySatellite {
                id: None,
                azimuth_deg: 45.0 * i as f64,
                elevation_deg: el,
                range: None,
                clock: 0.0,
            })
        })
        .collect()
}

/// Receiver clock: `initial + drift·t` plus a Gaussian random walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockModel {
    pub initial: f64,
    /// m/s
    pub drift: f64,
    /// m/√s
    pub random_walk: f64,
}

impl Default for ClockModel {
    fn default() -> Self {
        Self {
            initial: 100.0,
            drift: 0.0,
            random_walk: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Seconds.
    pub duration: f64,
    /// Hz.
    pub rate: f64,
    pub start_time: f64,
    pub trajectory: Trajectory,
    pub constellation: Vec<SatelliteSpec>,
    pub noise_sigma: f64,
    pub true_zenith_tropo: f64,
    pub true_clock_model: ClockModel,
    /// First-order ionospheric delay on L1, meters. Only shapes the
    /// dual-frequency pair written to disk; it cancels in the combination.
    pub iono_l1_delay: f64,
    pub elevation_mask: f64,
    pub mapping: MappingFunction,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            duration: 200.0,
            rate: 1.0,
            start_time: 0.0,
            trajectory: Trajectory::default(),
            constellation: default_constellation(),
            noise_sigma: 1.0,
            true_zenith_tropo: 2.4,
            true_clock_model: ClockModel::default(),
            iono_l1_delay: 5.0,
            elevation_mask: 10.0,
            mapping: MappingFunction::default(),
            seed: 1,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidSpec(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return bad(format!("rate must be positive, got {}", self.rate));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.epoch_count() == 0 {
            return bad("duration·rate rounds to zero epochs".into());
        }
        let c = &self.true_clock_model;
        if !(c.random_walk >= 0.0) || !c.initial.is_finite() || !c.drift.is_finite() {
            return bad("clock model parameters must be finite, random_walk ≥ 0".into());
        }
        if !self.true_zenith_tropo.is_finite() || !self.start_time.is_finite() {
            return bad("non-finite tropo or start time".into());
        }
        if self.constellation.len() < MIN_VISIBLE {
            return bad(format!(
                "constellation has {} satellites, at least {MIN_VISIBLE} required",
                self.constellation.len()
            ));
        }
        self.trajectory.validate()
    }

    pub fn epoch_count(&self) -> usize {
        (self.duration * self.rate).round() as usize
    }

    /// Epoch `k` is stamped at the end of its sampling interval.
    pub fn epoch_time(&self, k: usize) -> f64 {
        self.start_time + (k + 1) as f64 / self.rate
    }

    pub fn model(&self) -> PseudorangeModel {
        PseudorangeModel {
            mapping: self.mapping,
            elevation_mask_deg: Some(self.elevation_mask),
        }
    }

    fn satellites(&self) -> Result<Vec<ResolvedSatellite>, SimError> {
        let receiver = self.trajectory.start_position();
        if receiver.norm() < 1e6 {
            return Err(SimError::InvalidSpec(
                "trajectory start must lie away from the Earth center".into(),
            ));
        }
        let sats = self
            .constellation
            .iter()
            .enumerate()
            .map(|(i, s)| s.resolve(i, &receiver))
            .collect::<Result<Vec<_>, _>>()?;
        let mut ids: Vec<&str> = sats.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SimError::InvalidSpec("satellite ids must be unique".into()));
        }
        Ok(sats)
    }
}

/// Ground-truth receiver states, one per epoch.
pub fn generate_truth(spec: &ScenarioSpec) -> Result<Vec<TimedState>, SimError> {
    spec.validate()?;
    let clock = &spec.true_clock_model;
    let mut walk = 0.0;
    let dt = 1.0 / spec.rate;
    (0..spec.epoch_count())
        .map(|k| {
            let t = spec.epoch_time(k);
            let elapsed = t - spec.start_time;
            if clock.random_walk > 0.0 {
                let z: f64 = stream(spec.seed, DOMAIN_CLOCK, k as u64, 0).sample(StandardNormal);
                walk += clock.random_walk * dt.sqrt() * z;
            }
            let state = EpochState::new(
                spec.trajectory.position(elapsed),
                clock.initial + clock.drift * elapsed + walk,
                spec.true_zenith_tropo,
            );
            if !state.is_finite() {
                return Err(SimError::InvalidSpec(format!("non-finite truth at t = {t}")));
            }
            Ok(TimedState { t, state })
        })
        .collect()
}

/// Noisy ionosphere-free pseudoranges from every satellite above the mask.
///
/// Noise for epoch `k`, constellation slot `j` comes from its own stream,
/// so adding or removing satellites leaves the other draws unchanged.
pub fn synthesize_observations(
    truth: &[TimedState],
    spec: &ScenarioSpec,
) -> Result<Vec<PseudorangeObservation>, SimError> {
    spec.validate()?;
    let sats = spec.satellites()?;
    let model = spec.model();
    // A zero sigma would give the factors infinite information.
    let sigma = if spec.noise_sigma > 0.0 { spec.noise_sigma } else { 1.0 };
    let mut out = Vec::with_capacity(truth.len() * sats.len());
    for (k, epoch) in truth.iter().enumerate() {
        let elapsed = epoch.t - spec.start_time;
        let before = out.len();
        for (slot, sat) in sats.iter().enumerate() {
            let mut ctx = SatelliteContext::new(sat.id.clone(), sat.position + elapsed * sat.velocity);
            ctx.clock_bias = sat.clock;
            let el = elevation_angle(&epoch.state.position, &ctx.position)?;
            if el.to_degrees() < spec.elevation_mask {
                continue;
            }
            let clean = predict_pseudorange(&epoch.state, &ctx, &model)?;
            let noise = if spec.noise_sigma > 0.0 {
                let z: f64 = stream(spec.seed, DOMAIN_NOISE, k as u64, slot as u64).sample(StandardNormal);
                spec.noise_sigma * z
            } else {
                0.0
            };
            out.push(PseudorangeObservation {
                epoch: epoch.t,
                sat: ctx,
                rho_if: clean + noise,
                sigma,
            });
        }
        let visible = out.len() - before;
        if visible < MIN_VISIBLE {
            return Err(SimError::InsufficientVisibility { t: epoch.t, visible });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultSpec {
    pub probability: f64,
    /// Standard deviation of the zero-mean fault offset, meters.
    pub sigma_fault: f64,
    pub seed: u64,
}

impl Default for FaultSpec {
    fn default() -> Self {
        Self {
            probability: 0.0,
            sigma_fault: 50.0,
            seed: 2,
        }
    }
}

impl FaultSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        validate_probability(self.probability)?;
        if !(self.sigma_fault > 0.0 && self.sigma_fault.is_finite()) {
            return Err(SimError::InvalidFault(format!(
                "sigma_fault must be positive, got {}",
                self.sigma_fault
            )));
        }
        Ok(())
    }
}

pub fn validate_probability(p: f64) -> Result<(), SimError> {
    if !(0.0..=MAX_FAULT_PROBABILITY).contains(&p) {
        return Err(SimError::InvalidFault(format!(
            "fault probability {p} outside [0, {MAX_FAULT_PROBABILITY}]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultedObservations {
    pub observations: Vec<PseudorangeObservation>,
    pub mask: Vec<bool>,
    /// Offset added to each observation (0 where not faulted).
    pub offsets: Vec<f64>,
}

impl FaultedObservations {
    pub fn fault_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Faults each observation independently with the configured probability.
///
/// Observation `i` draws from its own stream, and the fault decision is
/// `u < p` on a single uniform, so with a fixed seed the faulted set grows
/// monotonically with `p`.
pub fn inject_faults(
    observations: &[PseudorangeObservation],
    fault: &FaultSpec,
) -> Result<FaultedObservations, SimError> {
    fault.validate()?;
    let mut out = observations.to_vec();
    let mut mask = vec![false; out.len()];
    let mut offsets = vec![0.0; out.len()];
    if fault.probability > 0.0 {
        for (i, obs) in out.iter_mut().enumerate() {
            let mut rng = stream(fault.seed, DOMAIN_FAULT, i as u64, 0);
            let u: f64 = rng.random();
            if u < fault.probability {
                let z: f64 = rng.sample(StandardNormal);
                let delta = fault.sigma_fault * z;
                obs.rho_if += delta;
                mask[i] = true;
                offsets[i] = delta;
            }
        }
    }
    Ok(FaultedObservations {
        observations: out,
        mask,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quiet(duration: f64) -> ScenarioSpec {
        ScenarioSpec {
            duration,
            true_clock_model: ClockModel {
                initial: 0.0,
                drift: 0.0,
                random_walk: 0.0,
            },
            ..Default::default()
        }
    }

    #[test]
    fn static_truth_repeats_origin() {
        let truth = generate_truth(&quiet(10.0)).unwrap();
        assert_eq!(truth.len(), 10);
        assert!(truth.iter().all(|s| s.state.position == truth[0].state.position));
        assert_relative_eq!(truth[1].t - truth[0].t, 1.0);
    }

    #[test]
    fn constant_velocity_kinematics() {
        let origin = default_origin();
        let spec = ScenarioSpec {
            trajectory: Trajectory::ConstantVelocity {
                origin,
                velocity: [1.0, 0.0, 0.0],
            },
            ..quiet(10.0)
        };
        for s in generate_truth(&spec).unwrap() {
            assert_relative_eq!(s.state.position.x, origin[0] + s.t, epsilon = 1e-9);
            assert_eq!(s.state.position.y, origin[1]);
        }
    }

    #[test]
    fn clock_ramp() {
        let spec = ScenarioSpec {
            true_clock_model: ClockModel {
                initial: 3.0,
                drift: 1e-3,
                random_walk: 0.0,
            },
            ..quiet(100.0)
        };
        let truth = generate_truth(&spec).unwrap();
        assert_relative_eq!(truth.last().unwrap().state.clock_bias, 3.1, epsilon = 1e-12);
    }

    #[test]
    fn waypoints_interpolate_and_hold() {
        let o = default_origin();
        let traj = Trajectory::Waypoints {
            points: vec![
                Waypoint { t: 0.0, position: o },
                Waypoint { t: 10.0, position: [o[0] + 10.0, o[1], o[2]] },
            ],
        };
        assert_relative_eq!(traj.position(5.0).x, o[0] + 5.0);
        assert_relative_eq!(traj.position(20.0).x, o[0] + 10.0);
    }

    #[test]
    fn sky_placement_reproduces_elevation() {
        let spec = ScenarioSpec::default();
        let rx = spec.trajectory.start_position();
        for (sat, cfg) in spec.satellites().unwrap().iter().zip(&spec.constellation) {
            let SatelliteSpec::Sky(sky) = cfg else { unreachable!() };
            let el = elevation_angle(&rx, &sat.position).unwrap().to_degrees();
            assert_relative_eq!(el, sky.elevation_deg, epsilon = 1e-9);
            assert_relative_eq!(sat.position.norm(), GPS_ORBIT_RADIUS, epsilon = 1e-3);
        }
    }

    #[test]
    fn too_few_visible_satellites() {
        let mut spec = quiet(3.0);
        spec.elevation_mask = 48.0;
        let truth = generate_truth(&spec).unwrap();
        assert!(matches!(
            synthesize_observations(&truth, &spec),
            Err(SimError::InsufficientVisibility { visible: 3, .. })
        ));
    }

    #[test]
    fn zero_probability_leaves_data_alone() {
        let spec = quiet(5.0);
        let obs = synthesize_observations(&generate_truth(&spec).unwrap(), &spec).unwrap();
        let f = inject_faults(&obs, &FaultSpec::default()).unwrap();
        assert_eq!(f.observations, obs);
        assert!(f.mask.iter().all(|m| !m));
    }

    #[test]
    fn probability_ceiling() {
        let f = FaultSpec {
            probability: 0.6,
            ..Default::default()
        };
        assert!(matches!(f.validate(), Err(SimError::InvalidFault(_))));
        assert!(validate_probability(0.49).is_ok());
    }
}
