//! Parameter containers, coordinate layout and the unconstrained transform.

use serde::{Deserialize, Serialize};

use super::{ModelError, ModelSpec};

/// A 2×2 covariance matrix held as two standard deviations and a correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectCov {
    pub sd1: f64,
    pub sd2: f64,
    pub corr: f64,
}

impl RandomEffectCov {
    pub fn new(sd1: f64, sd2: f64, corr: f64) -> Self {
        Self { sd1, sd2, corr }
    }

    pub fn zero() -> Self {
        Self { sd1: 0.0, sd2: 0.0, corr: 0.0 }
    }

    pub fn var1(&self) -> f64 {
        self.sd1 * self.sd1
    }

    pub fn var2(&self) -> f64 {
        self.sd2 * self.sd2
    }

    pub fn cov12(&self) -> f64 {
        self.corr * self.sd1 * self.sd2
    }

    /// Positive semi-definite (allowing zero scales).
    pub fn is_valid(&self) -> bool {
        self.sd1 >= 0.0 && self.sd2 >= 0.0 && self.corr.abs() <= 1.0 && self.sd1.is_finite() && self.sd2.is_finite()
    }

    /// Lower Cholesky factor applied to a standardized pair.
    pub fn apply(&self, z1: f64, z2: f64) -> (f64, f64) {
        let c = (1.0 - self.corr * self.corr).max(0.0).sqrt();
        (self.sd1 * z1, self.sd2 * (self.corr * z1 + c * z2))
    }
}

/// Constrained parameters of the mediator and outcome models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Mediator period effects `η_1t`, t = 1..T.
    pub eta1: Vec<f64>,
    /// Outcome period effects `η_2t`, aligned with `outcome_periods`.
    pub eta2: Vec<f64>,
    /// Periods that carry an outcome model, increasing.
    pub outcome_periods: Vec<usize>,
    pub gamma1: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub sigma_eps: f64,
    pub alpha: RandomEffectCov,
    pub phi: RandomEffectCov,
}

impl ModelParams {
    pub fn n_periods(&self) -> usize {
        self.eta1.len()
    }

    pub fn eta1_at(&self, t: usize) -> f64 {
        self.eta1[t - 1]
    }

    /// `η_2t`, or `None` when t has no outcome model.
    pub fn eta2_at(&self, t: usize) -> Option<f64> {
        self.outcome_periods.iter().position(|&p| p == t).map(|k| self.eta2[k])
    }

    /// Marginal variance of `M_ijt` given the design: `Σα11 + Σφ11 + σε²`.
    pub fn mediator_variance(&self) -> f64 {
        self.alpha.var1() + self.phi.var1() + self.sigma_eps * self.sigma_eps
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let bad = |what: &str| Err(ModelError::InvalidParams(what.to_string()));
        if self.eta2.len() != self.outcome_periods.len() {
            return bad("eta2 and outcome_periods differ in length");
        }
        if self.outcome_periods.windows(2).any(|w| w[0] >= w[1])
            || self.outcome_periods.iter().any(|&t| t == 0 || t > self.eta1.len())
        {
            return bad("outcome periods must be increasing and within 1..=T");
        }
        let scalars = [self.gamma1, self.beta1, self.beta2, self.beta3, self.beta4];
        if self.eta1.iter().chain(&self.eta2).chain(&scalars).any(|x| !x.is_finite()) {
            return bad("fixed effects must be finite");
        }
        if !(self.sigma_eps >= 0.0 && self.sigma_eps.is_finite()) {
            return bad("sigma_eps must be non-negative");
        }
        if !self.alpha.is_valid() || !self.phi.is_valid() {
            return bad("random-effect covariances must be positive semi-definite");
        }
        Ok(())
    }
}

/// Unconstrained coordinate layout for a given [`ModelSpec`] and data size.
///
/// Order: `eta1[1..T]`, `eta2[t ∈ outcome periods]`, `gamma1`, `beta1..beta4`,
/// `log_sigma_eps`, `log_sigma_alpha1`, `log_sigma_alpha2`, `atanh_rho_alpha`,
/// `log_sigma_phi1`, `log_sigma_phi2`, `atanh_rho_phi`, then the standardized
/// latents `z_alpha[j,1..2]` and `z_phi[i,1..2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub n_periods: usize,
    pub outcome_periods: Vec<usize>,
    pub n_clusters: usize,
    pub n_individuals: usize,
}

pub(crate) const N_SCALAR: usize = 12;

impl Layout {
    pub fn new(spec: &ModelSpec, n_periods: usize, n_clusters: usize, n_individuals: usize) -> Self {
        Self { n_periods, outcome_periods: spec.outcome_periods(n_periods), n_clusters, n_individuals }
    }

    pub fn eta1(&self) -> usize {
        0
    }

    pub fn eta2(&self) -> usize {
        self.n_periods
    }

    /// Start of `gamma1, beta1..beta4, log_sigma_eps, ...`.
    pub fn scalars(&self) -> usize {
        self.n_periods + self.outcome_periods.len()
    }

    /// Number of model-parameter coordinates (everything before the latents).
    pub fn n_params(&self) -> usize {
        self.scalars() + N_SCALAR
    }

    pub fn z_alpha(&self) -> usize {
        self.n_params()
    }

    pub fn z_phi(&self) -> usize {
        self.z_alpha() + 2 * self.n_clusters
    }

    pub fn dim(&self) -> usize {
        self.z_phi() + 2 * self.n_individuals
    }

    /// Names of the parameter coordinates (latents excluded).
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.n_periods).map(|t| format!("eta1[{t}]")).collect();
        names.extend(self.outcome_periods.iter().map(|t| format!("eta2[{t}]")));
        names.extend(
            [
                "gamma1",
                "beta1",
                "beta2",
                "beta3",
                "beta4",
                "log_sigma_eps",
                "log_sigma_alpha1",
                "log_sigma_alpha2",
                "atanh_rho_alpha",
                "log_sigma_phi1",
                "log_sigma_phi2",
                "atanh_rho_phi",
            ]
            .map(String::from),
        );
        names
    }

    /// Names of all coordinates including latents.
    pub fn all_names(&self) -> Vec<String> {
        let mut names = self.param_names();
        for j in 0..self.n_clusters {
            names.push(format!("z_alpha[{j},1]"));
            names.push(format!("z_alpha[{j},2]"));
        }
        for i in 0..self.n_individuals {
            names.push(format!("z_phi[{i},1]"));
            names.push(format!("z_phi[{i},2]"));
        }
        names
    }
}

/// Map constrained parameters to the unconstrained coordinates (latents excluded).
pub fn to_unconstrained(p: &ModelParams) -> Vec<f64> {
    let mut v = Vec::with_capacity(p.eta1.len() + p.eta2.len() + N_SCALAR);
    v.extend(&p.eta1);
    v.extend(&p.eta2);
    v.extend([
        p.gamma1,
        p.beta1,
        p.beta2,
        p.beta3,
        p.beta4,
        p.sigma_eps.ln(),
        p.alpha.sd1.ln(),
        p.alpha.sd2.ln(),
        p.alpha.corr.atanh(),
        p.phi.sd1.ln(),
        p.phi.sd2.ln(),
        p.phi.corr.atanh(),
    ]);
    v
}

/// Inverse of [`to_unconstrained`]; `v` may carry trailing latents, which are ignored.
pub fn from_unconstrained(v: &[f64], n_periods: usize, outcome_periods: &[usize]) -> ModelParams {
    let k = n_periods + outcome_periods.len();
    let s = &v[k..k + N_SCALAR];
    ModelParams {
        eta1: v[..n_periods].to_vec(),
        eta2: v[n_periods..k].to_vec(),
        outcome_periods: outcome_periods.to_vec(),
        gamma1: s[0],
        beta1: s[1],
        beta2: s[2],
        beta3: s[3],
        beta4: s[4],
        sigma_eps: s[5].exp(),
        alpha: RandomEffectCov::new(s[6].exp(), s[7].exp(), s[8].tanh()),
        phi: RandomEffectCov::new(s[9].exp(), s[10].exp(), s[11].tanh()),
    }
}

/// Log-Jacobian of [`from_unconstrained`]: `u` per log-scale, `log(1 - ρ²)` per correlation.
pub fn log_jacobian(v: &[f64], n_fixed: usize) -> f64 {
    let s = &v[n_fixed..n_fixed + N_SCALAR];
    let log_scale: f64 = [s[5], s[6], s[7], s[9], s[10]].iter().sum();
    let corr: f64 = [s[8], s[11]].iter().map(|w| log1m_tanh_sq(*w)).sum();
    log_scale + corr
}

/// `log(1 - tanh(w)²) = log 4 - 2|w| - 2 log(1 + e^{-2|w|})`, stable for large |w|.
pub(crate) fn log1m_tanh_sq(w: f64) -> f64 {
    let a = w.abs();
    (4.0f64).ln() - 2.0 * a - 2.0 * (-2.0 * a).exp().ln_1p()
}
