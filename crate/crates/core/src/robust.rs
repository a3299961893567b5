//! Robust optimization schemes.
//!
//! Huber, Cauchy and dynamic covariance scaling act as M-estimators on the
//! whitened pseudorange residual: the solver minimises `Σ 2ρ(e)` and
//! linearises with the IRLS weight `w(e) = ψ(e)/e`. Switchable constraints
//! add one latent switch per pseudorange factor. Max-mixtures select,
//! per factor, between a nominal and a wide "null" Gaussian.
//!
//! Only pseudorange factors are robustified; between and prior factors stay
//! quadratic under every scheme.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Factor, FactorGraph, FactorKind, GraphError, VariableKey};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RobustError {
    #[error("kernel width must be positive, got {0}")]
    NonPositiveKernelWidth(f64),
    #[error("squared error must be non-negative, got {0}")]
    NegativeChiSquared(f64),
    #[error("DCS parameter phi must be positive, got {0}")]
    NonPositivePhi(f64),
    #[error("max-mixture is degenerate: {0}")]
    DegenerateMixture(String),
    #[error("invalid robust configuration: {0}")]
    InvalidConfig(String),
    #[error("graph already carries switch variables")]
    AlreadyAugmented,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// The active robust scheme.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[default]
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "huber")]
    Huber,
    #[serde(rename = "cauchy")]
    Cauchy,
    #[serde(rename = "switch")]
    SwitchConstraints,
    #[serde(rename = "dcs")]
    Dcs,
    #[serde(rename = "maxmix")]
    MaxMixture,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::L2,
        Scheme::Huber,
        Scheme::Cauchy,
        Scheme::SwitchConstraints,
        Scheme::Dcs,
        Scheme::MaxMixture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::L2 => "l2",
            Scheme::Huber => "huber",
            Scheme::Cauchy => "cauchy",
            Scheme::SwitchConstraints => "switch",
            Scheme::Dcs => "dcs",
            Scheme::MaxMixture => "maxmix",
        }
    }

    /// Classical 95%-efficiency widths for the M-estimators.
    pub fn default_kernel_width(self) -> f64 {
        match self {
            Scheme::Cauchy => 2.3849,
            _ => 1.345,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = RobustError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|scheme| scheme.name() == s)
            .ok_or_else(|| RobustError::InvalidConfig(format!("unknown scheme {s:?}")))
    }
}

/// Scheme selection and all scheme parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustConfig {
    pub scheme: Scheme,
    /// Huber/Cauchy width in whitened units; `None` uses the scheme default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_width: Option<f64>,
    /// Initial value and prior mean of every switch.
    pub switch_prior: f64,
    /// Variance of the switch prior.
    pub switch_prior_variance: f64,
    pub dcs_phi: f64,
    /// Mixture weight of the null hypothesis.
    pub null_weight: f64,
    /// Null-hypothesis variance as a multiple of the nominal variance.
    pub null_variance_inflation: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::L2,
            kernel_width: None,
            switch_prior: 1.0,
            switch_prior_variance: 1.0,
            dcs_phi: 1.0,
            null_weight: 0.1,
            null_variance_inflation: 2500.0,
        }
    }
}

impl RobustConfig {
    pub fn with_scheme(scheme: Scheme) -> Self {
        Self {
            scheme,
            ..Self::default()
        }
    }

    pub fn kernel_width(&self) -> f64 {
        self.kernel_width
            .unwrap_or_else(|| self.scheme.default_kernel_width())
    }

    pub fn validate(&self) -> Result<(), RobustError> {
        let k = self.kernel_width();
        if !(k > 0.0) {
            return Err(RobustError::NonPositiveKernelWidth(k));
        }
        if !(self.switch_prior_variance > 0.0) {
            return Err(RobustError::InvalidConfig(format!(
                "switch_prior_variance must be positive, got {}",
                self.switch_prior_variance
            )));
        }
        if !(0.0..=1.0).contains(&self.switch_prior) {
            return Err(RobustError::InvalidConfig(format!(
                "switch_prior must lie in [0, 1], got {}",
                self.switch_prior
            )));
        }
        if !(self.dcs_phi > 0.0) {
            return Err(RobustError::NonPositivePhi(self.dcs_phi));
        }
        if !(self.null_weight > 0.0 && self.null_weight < 1.0) {
            return Err(RobustError::DegenerateMixture(format!(
                "null_weight must lie in (0, 1), got {}",
                self.null_weight
            )));
        }
        if !(self.null_variance_inflation > 1.0) {
            return Err(RobustError::DegenerateMixture(format!(
                "null_variance_inflation must exceed 1, got {}",
                self.null_variance_inflation
            )));
        }
        Ok(())
    }

    /// Cost contribution (in squared-whitened-residual units) and IRLS
    /// weight of a pseudorange factor with whitened residual norm `e`.
    ///
    /// Assumes [`validate`](Self::validate) has passed.
    pub fn pseudorange_term(&self, e: f64) -> RobustTerm {
        let quadratic = RobustTerm {
            cost: e * e,
            weight: 1.0,
        };
        let from_kernel = |k: KernelEvaluation| RobustTerm {
            cost: 2.0 * k.rho,
            weight: k.weight,
        };
        match self.scheme {
            Scheme::L2 | Scheme::SwitchConstraints => quadratic,
            Scheme::Huber => from_kernel(huber_unchecked(e, self.kernel_width())),
            Scheme::Cauchy => from_kernel(cauchy_unchecked(e, self.kernel_width())),
            Scheme::Dcs => from_kernel(dcs_kernel_unchecked(e, self.dcs_phi)),
            Scheme::MaxMixture => {
                let sel = maxmix_select(e, 1.0, self.null_weight, self.null_variance_inflation);
                let inlier_penalty = -(1.0 - self.null_weight).ln();
                RobustTerm {
                    cost: e * e * sel.effective_weight
                        + 2.0 * (sel.normalization_penalty - inlier_penalty),
                    weight: sel.effective_weight,
                }
            }
        }
    }
}

/// Per-factor robust cost and information weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustTerm {
    pub cost: f64,
    pub weight: f64,
}

/// Cost `rho`, influence `psi = rho'` and IRLS weight `psi / e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelEvaluation {
    pub rho: f64,
    pub psi: f64,
    pub weight: f64,
}

fn check_width(k: f64) -> Result<(), RobustError> {
    if k > 0.0 {
        Ok(())
    } else {
        Err(RobustError::NonPositiveKernelWidth(k))
    }
}

/// Huber kernel: quadratic inside `|e| ≤ k`, linear outside.
pub fn huber(e: f64, k: f64) -> Result<KernelEvaluation, RobustError> {
    check_width(k)?;
    Ok(huber_unchecked(e, k))
}

fn huber_unchecked(e: f64, k: f64) -> KernelEvaluation {
    let a = e.abs();
    if a <= k {
        KernelEvaluation {
            rho: 0.5 * e * e,
            psi: e,
            weight: 1.0,
        }
    } else {
        KernelEvaluation {
            rho: k * (a - 0.5 * k),
            psi: k * e.signum(),
            weight: k / a,
        }
    }
}

/// Cauchy kernel; redescending.
pub fn cauchy(e: f64, k: f64) -> Result<KernelEvaluation, RobustError> {
    check_width(k)?;
    Ok(cauchy_unchecked(e, k))
}

fn cauchy_unchecked(e: f64, k: f64) -> KernelEvaluation {
    let r = e * e / (k * k);
    let weight = 1.0 / (1.0 + r);
    KernelEvaluation {
        rho: 0.5 * k * k * r.ln_1p(),
        psi: e * weight,
        weight,
    }
}

/// Dynamic covariance scaling factor `min(1, 2Φ / (Φ + χ²))`.
pub fn dcs_scale(phi: f64, chi2: f64) -> Result<f64, RobustError> {
    if !(phi > 0.0) {
        return Err(RobustError::NonPositivePhi(phi));
    }
    if !(chi2 >= 0.0) {
        return Err(RobustError::NegativeChiSquared(chi2));
    }
    Ok(dcs_scale_unchecked(phi, chi2))
}

fn dcs_scale_unchecked(phi: f64, chi2: f64) -> f64 {
    (2.0 * phi / (phi + chi2)).min(1.0)
}

/// DCS expressed as an M-estimator whose IRLS weight is `s²`.
///
/// Integrating `ψ(e) = s(e²)² e` gives `ρ = e²/2` for `e² ≤ Φ` and
/// `ρ = 3Φ/2 − 2Φ²/(Φ + e²)` beyond, which is bounded (redescending).
pub fn dcs_kernel(e: f64, phi: f64) -> Result<KernelEvaluation, RobustError> {
    if !(phi > 0.0) {
        return Err(RobustError::NonPositivePhi(phi));
    }
    Ok(dcs_kernel_unchecked(e, phi))
}

fn dcs_kernel_unchecked(e: f64, phi: f64) -> KernelEvaluation {
    let chi2 = e * e;
    if chi2 <= phi {
        return KernelEvaluation {
            rho: 0.5 * chi2,
            psi: e,
            weight: 1.0,
        };
    }
    let s = dcs_scale_unchecked(phi, chi2);
    let weight = s * s;
    KernelEvaluation {
        rho: 1.5 * phi - 2.0 * phi * phi / (phi + chi2),
        psi: weight * e,
        weight,
    }
}

/// Switch function: identity clamped to `[0, 1]`, with its derivative.
///
/// The derivative is taken as 1 on the closed interval so a switch sitting
/// exactly at 1 still feels the residual.
pub fn switch_function(s: f64) -> (f64, f64) {
    if (0.0..=1.0).contains(&s) {
        (s, 1.0)
    } else {
        (s.clamp(0.0, 1.0), 0.0)
    }
}

/// Mixture component chosen by the max operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Inlier,
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxMixSelection {
    pub selected: Component,
    /// Multiplier on the nominal information (1 for the inlier component).
    pub effective_weight: f64,
    /// `−ln w + ½ ln Λ` of the selected component.
    pub normalization_penalty: f64,
}

/// Negative log-likelihood (without the `½ ln 2π` constant) of `e` under
/// `w · N(0, variance)`.
pub fn component_nll(e: f64, weight: f64, variance: f64) -> f64 {
    0.5 * e * e / variance - weight.ln() + 0.5 * variance.ln()
}

/// Picks the mixture component with the larger weighted density at raw
/// residual `e`; the null component is zero-mean with inflated variance.
pub fn maxmix_evaluate(
    e: f64,
    sigma: f64,
    robust: &RobustConfig,
) -> Result<MaxMixSelection, RobustError> {
    if !(sigma > 0.0) {
        return Err(RobustError::DegenerateMixture(format!(
            "nominal sigma must be positive, got {sigma}"
        )));
    }
    if !(robust.null_variance_inflation > 1.0) {
        return Err(RobustError::DegenerateMixture(format!(
            "null_variance_inflation must exceed 1, got {}",
            robust.null_variance_inflation
        )));
    }
    if !(robust.null_weight > 0.0 && robust.null_weight < 1.0) {
        return Err(RobustError::DegenerateMixture(format!(
            "null_weight must lie in (0, 1), got {}",
            robust.null_weight
        )));
    }
    Ok(maxmix_select(
        e,
        sigma,
        robust.null_weight,
        robust.null_variance_inflation,
    ))
}

fn maxmix_select(e: f64, sigma: f64, null_weight: f64, inflation: f64) -> MaxMixSelection {
    let var = sigma * sigma;
    let inlier = component_nll(e, 1.0 - null_weight, var);
    let null = component_nll(e, null_weight, inflation * var);
    if inlier <= null {
        MaxMixSelection {
            selected: Component::Inlier,
            effective_weight: 1.0,
            normalization_penalty: -(1.0 - null_weight).ln() + 0.5 * var.ln(),
        }
    } else {
        MaxMixSelection {
            selected: Component::Null,
            effective_weight: 1.0 / inflation,
            normalization_penalty: -null_weight.ln() + 0.5 * (inflation * var).ln(),
        }
    }
}

/// Adds one switch variable and switch prior per pseudorange factor and
/// routes the factor's residual through the switch. Between and prior
/// factors stay unswitched.
///
/// Switch keys share the epoch index of the state they gate; the sub-index
/// counts pseudorange factors within that epoch in insertion order.
pub fn augment_with_switches(
    mut graph: FactorGraph,
    robust: &RobustConfig,
) -> Result<FactorGraph, RobustError> {
    if graph.is_augmented() {
        return Err(RobustError::AlreadyAugmented);
    }
    robust.validate()?;
    let mut slots: std::collections::HashMap<usize, usize> = Default::default();
    let targets: Vec<(usize, usize)> = graph
        .factors()
        .iter()
        .enumerate()
        .filter(|(_, f)| f.kind() == FactorKind::Pseudorange)
        .map(|(i, f)| (i, f.keys()[0].epoch_index))
        .collect();
    for (index, epoch) in targets {
        let slot = slots.entry(epoch).or_insert(0);
        let key = VariableKey::switch(epoch, *slot);
        *slot += 1;
        graph.add_variable(key, DVector::from_element(1, robust.switch_prior))?;
        graph.attach_switch(index, key)?;
        graph.add_factor(Factor::switch_prior(
            key,
            robust.switch_prior,
            robust.switch_prior_variance,
        )?)?;
    }
    graph.mark_augmented();
    Ok(graph)
}
