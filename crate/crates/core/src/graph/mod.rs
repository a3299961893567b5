//! Factor graph representation.
//!
//! Variables are vectors keyed by [`VariableKey`]; factors produce whitened
//! residuals `L⁻¹(h(x) − z)` with `LLᵀ = Σ`, so the squared norm of a
//! factor's residual is its contribution to the batch objective.

pub mod solver;

use std::fmt;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector, Vector5};
use thiserror::Error;

use crate::gnss::{self, EpochState, GnssError, MappingFunction, PseudorangeModel, PseudorangeObservation, STATE_DIM};
use crate::robust::{switch_function, RobustConfig};

/// Covariance condition numbers above this are reported.
const CONDITION_WARN: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("variable {0} already present")]
    DuplicateKey(VariableKey),
    #[error("variable {key} expects dimension {expected}, got {actual}")]
    DimensionMismatch {
        key: VariableKey,
        expected: usize,
        actual: usize,
    },
    #[error("variable {0} is not in the graph")]
    MissingVariable(VariableKey),
    #[error("factor {factor} produced a non-finite residual")]
    NonFiniteResidual { factor: usize },
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("factor {0} is not an unswitched pseudorange factor")]
    NotSwitchable(usize),
    #[error(transparent)]
    Gnss(#[from] GnssError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariableKind {
    State,
    Switch,
}

/// Identifies a variable. `sub_index` is the switch slot within an epoch
/// and always 0 for states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VariableKey {
    pub kind: VariableKind,
    pub epoch_index: usize,
    pub sub_index: usize,
}

impl VariableKey {
    pub fn state(epoch_index: usize) -> Self {
        Self {
            kind: VariableKind::State,
            epoch_index,
            sub_index: 0,
        }
    }

    pub fn switch(epoch_index: usize, slot: usize) -> Self {
        Self {
            kind: VariableKind::Switch,
            epoch_index,
            sub_index: slot,
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            VariableKind::State => STATE_DIM,
            VariableKind::Switch => 1,
        }
    }

    /// Sort key that keeps each epoch's variables adjacent, which bounds
    /// Cholesky fill-in for time-ordered graphs.
    pub(crate) fn elimination_key(&self) -> (usize, VariableKind, usize) {
        (self.epoch_index, self.kind, self.sub_index)
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            VariableKind::State => write!(f, "x{}", self.epoch_index),
            VariableKind::Switch => write!(f, "s{}.{}", self.epoch_index, self.sub_index),
        }
    }
}

/// Variable assignments in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Values(IndexMap<VariableKey, DVector<f64>>);

impl Values {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: VariableKey, value: DVector<f64>) -> Option<DVector<f64>> {
        self.0.insert(key, value)
    }

    pub fn get(&self, key: &VariableKey) -> Option<&DVector<f64>> {
        self.0.get(key)
    }

    pub(crate) fn get_mut(&mut self, key: &VariableKey) -> Option<&mut DVector<f64>> {
        self.0.get_mut(key)
    }

    pub fn contains(&self, key: &VariableKey) -> bool {
        self.0.contains_key(key)
    }

    pub fn index_of(&self, key: &VariableKey) -> Option<usize> {
        self.0.get_index_of(key)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &VariableKey> {
        self.0.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VariableKey, &DVector<f64>)> {
        self.0.iter()
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut DVector<f64>> {
        self.0.values_mut()
    }

    pub fn state(&self, epoch_index: usize) -> Option<EpochState> {
        self.get(&VariableKey::state(epoch_index))
            .map(|v| EpochState::from_slice(v.as_slice()))
    }

    pub fn switch(&self, epoch_index: usize, slot: usize) -> Option<f64> {
        self.get(&VariableKey::switch(epoch_index, slot)).map(|v| v[0])
    }

    fn require(&self, key: &VariableKey) -> Result<&DVector<f64>, GraphError> {
        self.get(key).ok_or(GraphError::MissingVariable(*key))
    }
}

/// Zero-mean Gaussian noise, stored as its whitening matrix `L⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNoise {
    whitening: DMatrix<f64>,
}

impl GaussianNoise {
    pub fn from_covariance(covariance: DMatrix<f64>) -> Result<Self, GraphError> {
        let n = covariance.nrows();
        if n == 0 || covariance.ncols() != n {
            return Err(GraphError::InvalidNoise(format!(
                "covariance must be square and non-empty, got {}x{}",
                n,
                covariance.ncols()
            )));
        }
        if covariance.iter().any(|x| !x.is_finite()) {
            return Err(GraphError::InvalidNoise("covariance has non-finite entries".into()));
        }
        let asym = (&covariance - covariance.transpose()).amax();
        if asym > 1e-12 * covariance.amax() {
            return Err(GraphError::InvalidNoise("covariance is not symmetric".into()));
        }
        let eig = covariance.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if lo > 0.0 && hi / lo > CONDITION_WARN {
            log::warn!("noise covariance condition number {:.3e} exceeds 1e12", hi / lo);
        }
        let chol = covariance
            .cholesky()
            .ok_or_else(|| GraphError::InvalidNoise("covariance is not positive definite".into()))?;
        let whitening = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| GraphError::InvalidNoise("singular covariance factor".into()))?;
        Ok(Self { whitening })
    }

    /// Independent components with the given standard deviations.
    pub fn from_sigmas(sigmas: &[f64]) -> Result<Self, GraphError> {
        if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(GraphError::InvalidNoise(format!(
                "sigmas must be positive and finite, got {sigmas:?}"
            )));
        }
        let hi = sigmas.iter().cloned().fold(0.0, f64::max);
        let lo = sigmas.iter().cloned().fold(f64::INFINITY, f64::min);
        if (hi / lo).powi(2) > CONDITION_WARN {
            log::warn!("noise covariance condition number {:.3e} exceeds 1e12", (hi / lo).powi(2));
        }
        let diag = DVector::from_iterator(sigmas.len(), sigmas.iter().map(|s| 1.0 / s));
        Ok(Self {
            whitening: DMatrix::from_diagonal(&diag),
        })
    }

    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self, GraphError> {
        Self::from_sigmas(&vec![sigma; dim])
    }

    pub fn dim(&self) -> usize {
        self.whitening.nrows()
    }

    pub fn whitening(&self) -> &DMatrix<f64> {
        &self.whitening
    }

    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.whitening * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Pseudorange,
    Between,
    Prior,
    SwitchPrior,
}

/// Measurement data carried by a factor.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Pseudorange {
        observation: PseudorangeObservation,
        model: PseudorangeModel,
    },
    /// Expected `b − a`.
    Between(DVector<f64>),
    Prior(DVector<f64>),
    /// Prior mean of a switch.
    SwitchPrior(f64),
}

/// Whitened residual and per-key whitened Jacobian blocks.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

type EliminationKey = (usize, VariableKind, usize);
type CanonicalKey = (EliminationKey, u8, String, Vec<u64>, Vec<EliminationKey>);

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    keys: Vec<VariableKey>,
    payload: Payload,
    noise: GaussianNoise,
}

impl Factor {
    fn check_dim(key: VariableKey, actual: usize) -> Result<(), GraphError> {
        if key.dim() != actual {
            return Err(GraphError::DimensionMismatch {
                key,
                expected: key.dim(),
                actual,
            });
        }
        Ok(())
    }

    pub fn prior(key: VariableKey, mean: DVector<f64>, noise: GaussianNoise) -> Result<Self, GraphError> {
        Self::check_dim(key, mean.len())?;
        Self::check_dim(key, noise.dim())?;
        Ok(Self {
            keys: vec![key],
            payload: Payload::Prior(mean),
            noise,
        })
    }

    pub fn between(
        a: VariableKey,
        b: VariableKey,
        delta: DVector<f64>,
        noise: GaussianNoise,
    ) -> Result<Self, GraphError> {
        Self::check_dim(a, delta.len())?;
        Self::check_dim(b, delta.len())?;
        Self::check_dim(a, noise.dim())?;
        Ok(Self {
            keys: vec![a, b],
            payload: Payload::Between(delta),
            noise,
        })
    }

    /// Pseudorange factor on a state; the noise comes from the observation
    /// sigma. The elevation mask is not re-applied during optimization.
    pub fn pseudorange(
        key: VariableKey,
        observation: PseudorangeObservation,
        mapping: MappingFunction,
    ) -> Result<Self, GraphError> {
        if key.kind != VariableKind::State {
            return Err(GraphError::DimensionMismatch {
                key,
                expected: STATE_DIM,
                actual: key.dim(),
            });
        }
        if !(observation.sigma > 0.0) {
            return Err(GnssError::NonPositiveSigma(observation.sigma).into());
        }
        let noise = GaussianNoise::isotropic(1, observation.sigma)?;
        Ok(Self {
            keys: vec![key],
            payload: Payload::Pseudorange {
                observation,
                model: PseudorangeModel::unmasked(mapping),
            },
            noise,
        })
    }

    /// Prior `‖γ − s‖²` with variance `variance` on a switch.
    pub fn switch_prior(key: VariableKey, gamma: f64, variance: f64) -> Result<Self, GraphError> {
        Self::check_dim(key, 1)?;
        if key.kind != VariableKind::Switch {
            return Err(GraphError::DimensionMismatch {
                key,
                expected: 1,
                actual: key.dim(),
            });
        }
        Ok(Self {
            keys: vec![key],
            payload: Payload::SwitchPrior(gamma),
            noise: GaussianNoise::isotropic(1, variance.sqrt())?,
        })
    }

    pub fn kind(&self) -> FactorKind {
        match self.payload {
            Payload::Pseudorange { .. } => FactorKind::Pseudorange,
            Payload::Between(_) => FactorKind::Between,
            Payload::Prior(_) => FactorKind::Prior,
            Payload::SwitchPrior(_) => FactorKind::SwitchPrior,
        }
    }

    pub fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn noise(&self) -> &GaussianNoise {
        &self.noise
    }

    /// The switch gating this factor, if it has been augmented.
    pub fn switch_key(&self) -> Option<VariableKey> {
        match self.payload {
            Payload::Pseudorange { .. } => self.keys.get(1).copied(),
            _ => None,
        }
    }

    fn canonical_key(&self) -> CanonicalKey {
        let (tag, label, mut bits) = match &self.payload {
            Payload::Pseudorange { observation, .. } => (
                0u8,
                observation.sat.sat_id.clone(),
                vec![observation.epoch.to_bits(), observation.rho_if.to_bits()],
            ),
            Payload::Between(d) => (1, String::new(), d.iter().map(|v| v.to_bits()).collect()),
            Payload::Prior(m) => (2, String::new(), m.iter().map(|v| v.to_bits()).collect()),
            Payload::SwitchPrior(g) => (3, String::new(), vec![g.to_bits()]),
        };
        bits.extend(self.noise.whitening().iter().map(|v| v.to_bits()));
        let rest = self.keys[1..].iter().map(|k| k.elimination_key()).collect();
        (self.keys[0].elimination_key(), tag, label, bits, rest)
    }

    /// Unwhitened residual `h(x) − z` and its Jacobian blocks.
    fn unwhitened(&self, values: &Values) -> Result<(DVector<f64>, Vec<DMatrix<f64>>), GraphError> {
        match &self.payload {
            Payload::Prior(mean) => {
                let x = values.require(&self.keys[0])?;
                check_len(self.keys[0], x)?;
                Ok((x - mean, vec![DMatrix::identity(mean.len(), mean.len())]))
            }
            Payload::Between(delta) => {
                let a = values.require(&self.keys[0])?;
                let b = values.require(&self.keys[1])?;
                check_len(self.keys[0], a)?;
                check_len(self.keys[1], b)?;
                let n = delta.len();
                Ok((
                    (b - a) - delta,
                    vec![-DMatrix::identity(n, n), DMatrix::identity(n, n)],
                ))
            }
            Payload::SwitchPrior(gamma) => {
                let s = values.require(&self.keys[0])?[0];
                Ok((DVector::from_element(1, s - gamma), vec![DMatrix::identity(1, 1)]))
            }
            Payload::Pseudorange { observation, model } => {
                let x = values.require(&self.keys[0])?;
                check_len(self.keys[0], x)?;
                let state = EpochState::from_slice(x.as_slice());
                let (predicted, row) = gnss::linearize_pseudorange(&state, &observation.sat, model)?;
                let error = predicted - observation.rho_if;
                let j_state = DMatrix::from_row_slice(1, STATE_DIM, row.as_slice());
                match self.switch_key() {
                    None => Ok((DVector::from_element(1, error), vec![j_state])),
                    Some(sk) => {
                        let (psi, dpsi) = switch_function(values.require(&sk)?[0]);
                        Ok((
                            DVector::from_element(1, psi * error),
                            vec![j_state * psi, DMatrix::from_element(1, 1, dpsi * error)],
                        ))
                    }
                }
            }
        }
    }

    /// Whitened residual and Jacobians at `values`. `index` is only used to
    /// label errors.
    pub fn linearize(&self, values: &Values, index: usize) -> Result<Linearization, GraphError> {
        let (r, jacobians) = self.unwhitened(values)?;
        let w = self.noise.whitening();
        let residual = w * r;
        let jacobians: Vec<_> = jacobians.into_iter().map(|j| w * j).collect();
        if residual.iter().chain(jacobians.iter().flat_map(|j| j.iter())).any(|v| !v.is_finite()) {
            return Err(GraphError::NonFiniteResidual { factor: index });
        }
        Ok(Linearization { residual, jacobians })
    }

    /// Whitened residual only.
    pub fn whitened_residual(&self, values: &Values) -> Result<DVector<f64>, GraphError> {
        let (r, _) = self.unwhitened(values)?;
        let residual = self.noise.whiten(&r);
        if residual.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::NonFiniteResidual { factor: usize::MAX });
        }
        Ok(residual)
    }

    /// Contribution of this factor to the objective under `robust`.
    /// Robust kernels act on pseudorange factors only.
    pub fn cost(&self, values: &Values, robust: &RobustConfig) -> Result<f64, GraphError> {
        let r = self.whitened_residual(values)?;
        Ok(match self.kind() {
            FactorKind::Pseudorange if self.switch_key().is_none() => {
                robust.pseudorange_term(r.norm()).cost
            }
            _ => r.norm_squared(),
        })
    }
}

fn check_len(key: VariableKey, v: &DVector<f64>) -> Result<(), GraphError> {
    if v.len() != key.dim() {
        return Err(GraphError::DimensionMismatch {
            key,
            expected: key.dim(),
            actual: v.len(),
        });
    }
    Ok(())
}

/// `L⁻¹(h(x) − z)` for one factor.
pub fn evaluate_factor(factor: &Factor, values: &Values) -> Result<DVector<f64>, GraphError> {
    factor.whitened_residual(values)
}

/// Whitened `(b − a) − delta` between two epoch states.
pub fn between_factor_error(
    state_a: &EpochState,
    state_b: &EpochState,
    delta: &Vector5<f64>,
    noise: &GaussianNoise,
) -> Result<DVector<f64>, GraphError> {
    if noise.dim() != STATE_DIM {
        return Err(GraphError::InvalidNoise(format!(
            "between noise must be {STATE_DIM}-dimensional"
        )));
    }
    let r = (state_b.to_vector() - state_a.to_vector()) - delta;
    let whitened = noise.whiten(&DVector::from_column_slice(r.as_slice()));
    if whitened.iter().any(|v| !v.is_finite()) {
        return Err(GraphError::NonFiniteResidual { factor: usize::MAX });
    }
    Ok(whitened)
}

/// Variables with initial values plus the factors constraining them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FactorGraph {
    initial: Values,
    factors: Vec<Factor>,
    augmented: bool,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, key: VariableKey, initial: DVector<f64>) -> Result<(), GraphError> {
        if self.initial.contains(&key) {
            return Err(GraphError::DuplicateKey(key));
        }
        check_len(key, &initial)?;
        self.initial.insert(key, initial);
        Ok(())
    }

    /// Adds a factor whose keys must already be registered; returns its index.
    pub fn add_factor(&mut self, factor: Factor) -> Result<usize, GraphError> {
        if let Some(missing) = factor.keys().iter().find(|k| !self.initial.contains(k)) {
            return Err(GraphError::MissingVariable(*missing));
        }
        self.factors.push(factor);
        Ok(self.factors.len() - 1)
    }

    /// Routes pseudorange factor `index` through switch `key`.
    pub(crate) fn attach_switch(&mut self, index: usize, key: VariableKey) -> Result<(), GraphError> {
        if !self.initial.contains(&key) {
            return Err(GraphError::MissingVariable(key));
        }
        let factor = self.factors.get_mut(index).ok_or(GraphError::NotSwitchable(index))?;
        if factor.kind() != FactorKind::Pseudorange || factor.keys.len() != 1 {
            return Err(GraphError::NotSwitchable(index));
        }
        factor.keys.push(key);
        Ok(())
    }

    pub(crate) fn mark_augmented(&mut self) {
        self.augmented = true;
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn initial(&self) -> &Values {
        &self.initial
    }

    /// Replaces the initial value of an existing variable.
    pub fn set_initial(&mut self, key: VariableKey, value: DVector<f64>) -> Result<(), GraphError> {
        check_len(key, &value)?;
        let slot = self.initial.get_mut(&key).ok_or(GraphError::MissingVariable(key))?;
        *slot = value;
        Ok(())
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn variable_count(&self) -> usize {
        self.initial.len()
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    /// Objective value at `values` under `robust`.
    pub fn total_error(&self, values: &Values, robust: &RobustConfig) -> Result<f64, GraphError> {
        self.total_error_in(values, robust, 0..self.factors.len())
    }

    /// Objective summed over factor indices in the given order.
    pub(crate) fn total_error_in(
        &self,
        values: &Values,
        robust: &RobustConfig,
        order: impl IntoIterator<Item = usize>,
    ) -> Result<f64, GraphError> {
        order.into_iter().try_fold(0.0, |acc, i| {
            self.factors[i]
                .cost(values, robust)
                .map(|c| acc + c)
                .map_err(|e| match e {
                    GraphError::NonFiniteResidual { .. } => GraphError::NonFiniteResidual { factor: i },
                    other => other,
                })
        })
    }

    /// Factor indices ordered by factor content alone, so that sums over
    /// factors do not depend on insertion order.
    pub(crate) fn canonical_factor_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.factors.len()).collect();
        order.sort_by_cached_key(|&i| self.factors[i].canonical_key());
        order
    }
}
