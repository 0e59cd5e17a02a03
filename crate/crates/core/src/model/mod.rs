//! Observed-data mixed-effects model for the mediator and the binary outcome.
//!
//! The mediator follows a Gaussian linear mixed model and the outcome a
//! logistic mixed model, with correlated cluster-level `(α_1j, α_2j)` and
//! individual-level `(φ_1ij, φ_2ij)` random effects:
//!
//! ```text
//! M_ijt          = η_1t + γ_1 Z_jt + α_1j + φ_1ij + ε_ijt
//! logit P(Y_ijt) = η_2t + β_1 Z_jt + β_2 M* + β_3 Z_jt M* + β_4 Z_j,t-1 M* + α_2j + φ_2ij
//! ```
//!
//! `M*` is the contemporaneous mediator by default, or the previous period's
//! with `mediator_lag = 1`. Latents are sampled in non-centered form.

mod density;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{observed_rows, TrialDataset};

pub use density::{log_joint, log_joint_grad, LogJointTerms, Posterior};
pub use params::{from_unconstrained, log_jacobian, to_unconstrained, Layout, ModelParams, RandomEffectCov};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("row {row} references {what} {index}, but only {count} exist")]
    Index { row: usize, what: &'static str, index: usize, count: usize },
    #[error("vector has length {got}, layout expects {want}")]
    Dimension { got: usize, want: usize },
    #[error("invalid model specification: {0}")]
    Spec(String),
}

/// Link function of the marginal structural shift model for `Y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Logit,
    Identity,
}

impl Link {
    /// Inverse link `g⁻¹`.
    pub fn inverse(self, x: f64) -> f64 {
        match self {
            Self::Logit => crate::numerics::expit(x),
            Self::Identity => x,
        }
    }

    /// Derivative of the inverse link.
    pub fn inverse_prime(self, x: f64) -> f64 {
        match self {
            Self::Logit => crate::numerics::expit_prime(x),
            Self::Identity => 1.0,
        }
    }
}

/// Structural choices that are not estimated.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// 0: the outcome model uses `M_ijt`; 1: it uses `M_ij,t-1`.
    pub mediator_lag: u8,
    /// Periods with an outcome model. Defaults to `2..=T`.
    pub outcome_periods: Option<Vec<usize>>,
}

impl ModelSpec {
    pub fn outcome_periods(&self, n_periods: usize) -> Vec<usize> {
        match &self.outcome_periods {
            Some(p) => p.clone(),
            None => (2..=n_periods).collect(),
        }
    }

    pub fn check(&self, n_periods: usize) -> Result<(), ModelError> {
        if self.mediator_lag > 1 {
            return Err(ModelError::Spec(format!("mediator_lag must be 0 or 1, got {}", self.mediator_lag)));
        }
        let periods = self.outcome_periods(n_periods);
        if periods.is_empty() {
            return Err(ModelError::Spec("no outcome periods".into()));
        }
        if periods.windows(2).any(|w| w[0] >= w[1]) || periods.iter().any(|&t| t == 0 || t > n_periods) {
            return Err(ModelError::Spec(format!("outcome periods {periods:?} must be increasing within 1..={n_periods}")));
        }
        if self.mediator_lag == 1 && periods[0] == 1 {
            return Err(ModelError::Spec("a lagged mediator needs outcome periods ≥ 2".into()));
        }
        Ok(())
    }
}

/// Prior hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperPriors {
    /// Variance of the normal prior on every fixed effect (η, γ_1, β).
    pub fixed_effect_variance: f64,
    /// Rate of the exponential prior on every standard deviation.
    pub sd_rate: f64,
}

impl Default for HyperPriors {
    fn default() -> Self {
        Self { fixed_effect_variance: 10.0, sd_rate: 1.0 }
    }
}

impl HyperPriors {
    pub fn check(&self) -> Result<(), ModelError> {
        if !(self.fixed_effect_variance > 0.0 && self.fixed_effect_variance.is_finite()) {
            return Err(ModelError::Spec("fixed_effect_variance must be positive".into()));
        }
        if !(self.sd_rate > 0.0 && self.sd_rate.is_finite()) {
            return Err(ModelError::Spec("sd_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Standardized random effects; the actual effects are `L z` per level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentEffects {
    pub z_alpha: Vec<[f64; 2]>,
    pub z_phi: Vec<[f64; 2]>,
}

impl LatentEffects {
    pub fn zeros(n_clusters: usize, n_individuals: usize) -> Self {
        Self { z_alpha: vec![[0.0; 2]; n_clusters], z_phi: vec![[0.0; 2]; n_individuals] }
    }

    /// Read the latent block of a full unconstrained vector.
    pub fn from_vector(v: &[f64], layout: &Layout) -> Self {
        let pairs = |start: usize, n: usize| (0..n).map(|k| [v[start + 2 * k], v[start + 2 * k + 1]]).collect();
        Self { z_alpha: pairs(layout.z_alpha(), layout.n_clusters), z_phi: pairs(layout.z_phi(), layout.n_individuals) }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.z_alpha.iter().chain(&self.z_phi).flat_map(|p| *p).collect()
    }

    /// `(α_1j, α_2j)` per cluster.
    pub fn cluster_effects(&self, p: &ModelParams) -> Vec<(f64, f64)> {
        self.z_alpha.iter().map(|z| p.alpha.apply(z[0], z[1])).collect()
    }

    /// `(φ_1ij, φ_2ij)` per individual.
    pub fn individual_effects(&self, p: &ModelParams) -> Vec<(f64, f64)> {
        self.z_phi.iter().map(|z| p.phi.apply(z[0], z[1])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MediatorRow {
    pub cluster: usize,
    pub individual: usize,
    pub period: usize,
    pub treatment: bool,
    pub mediator: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeRow {
    pub cluster: usize,
    pub individual: usize,
    /// Index into the outcome-period list.
    pub eta2_index: usize,
    pub treatment: bool,
    pub prev_treatment: bool,
    /// The mediator regressor `M*`.
    pub mediator: f64,
    pub outcome: bool,
}

/// Likelihood rows in the form the density evaluator consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelData {
    pub layout: Layout,
    pub mediator_rows: Vec<MediatorRow>,
    pub outcome_rows: Vec<OutcomeRow>,
}

impl ModelData {
    /// Observed rows of a validated dataset under the given specification.
    pub fn new(data: &TrialDataset, spec: &ModelSpec) -> Result<Self, ModelError> {
        spec.check(data.n_periods())?;
        let view = observed_rows(data, false);
        let layout = Layout::new(spec, data.n_periods(), data.n_clusters(), data.n_individuals());
        let mut mediator_rows = Vec::with_capacity(view.rows.len());
        let mut outcome_rows = Vec::with_capacity(view.rows.len());
        for r in &view.rows {
            mediator_rows.push(MediatorRow {
                cluster: r.cluster,
                individual: r.individual,
                period: r.period,
                treatment: r.treatment,
                mediator: r.mediator,
            });
            let Some(k) = layout.outcome_periods.iter().position(|&t| t == r.period) else { continue };
            let mstar = match spec.mediator_lag {
                0 => r.mediator,
                _ => match r.lag {
                    Some(lag) => lag.mediator,
                    None => continue,
                },
            };
            outcome_rows.push(OutcomeRow {
                cluster: r.cluster,
                individual: r.individual,
                eta2_index: k,
                treatment: r.treatment,
                prev_treatment: r.prev_treatment,
                mediator: mstar,
                outcome: r.outcome,
            });
        }
        let md = Self { layout, mediator_rows, outcome_rows };
        md.check_indices()?;
        Ok(md)
    }

    /// Assemble from raw rows, checking every index against the layout.
    pub fn from_rows(layout: Layout, mediator_rows: Vec<MediatorRow>, outcome_rows: Vec<OutcomeRow>) -> Result<Self, ModelError> {
        let md = Self { layout, mediator_rows, outcome_rows };
        md.check_indices()?;
        Ok(md)
    }

    fn check_indices(&self) -> Result<(), ModelError> {
        let l = &self.layout;
        let check = |row: usize, what: &'static str, index: usize, count: usize| {
            if index < count {
                Ok(())
            } else {
                Err(ModelError::Index { row, what, index, count })
            }
        };
        for (k, r) in self.mediator_rows.iter().enumerate() {
            check(k, "cluster", r.cluster, l.n_clusters)?;
            check(k, "individual", r.individual, l.n_individuals)?;
            if r.period == 0 {
                return Err(ModelError::Index { row: k, what: "period", index: 0, count: l.n_periods });
            }
            check(k, "period", r.period - 1, l.n_periods)?;
        }
        for (k, r) in self.outcome_rows.iter().enumerate() {
            check(k, "cluster", r.cluster, l.n_clusters)?;
            check(k, "individual", r.individual, l.n_individuals)?;
            check(k, "outcome period", r.eta2_index, l.outcome_periods.len())?;
        }
        Ok(())
    }
}
