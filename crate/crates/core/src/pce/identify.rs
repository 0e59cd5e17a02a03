//! Pointwise identification pieces: the cross-world mediator law, stratum
//! probabilities, the observed conditional outcome mean and the intercept Δ.

use super::PceError;
use crate::model::{Link, ModelParams};
use crate::numerics::{expit, logit, newton_solve_fdf, std_normal_cdf, std_normal_sf, GaussHermiteRule, Interval, NewtonConfig};

/// Cross-world conditional variances below this magnitude are rounding noise.
const VARIANCE_SLACK: f64 = 1e-12;

/// Bivariate normal law of `(M(0̲_t), M(1̲_t))` under a Gaussian copula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointMediatorLaw {
    pub mu0: f64,
    pub mu1: f64,
    /// Common marginal variance `Σα11 + Σφ11 + σε²`.
    pub var: f64,
    pub rho: f64,
}

impl JointMediatorLaw {
    pub fn new(mu0: f64, mu1: f64, var: f64, rho: f64) -> Result<Self, PceError> {
        if !(rho.abs() < 1.0) {
            return Err(PceError::Rho(rho));
        }
        if !(var > 0.0 && var.is_finite()) || !mu0.is_finite() || !mu1.is_finite() {
            return Err(PceError::Degenerate(format!("mediator law needs finite means and var > 0, got var = {var}")));
        }
        Ok(Self { mu0, mu1, var, rho })
    }

    pub fn mean(&self, z: bool) -> f64 {
        if z {
            self.mu1
        } else {
            self.mu0
        }
    }

    /// Mean and variance of `M(1-z̲_t)` given `M(z̲_t) = m`.
    pub fn cross_world(&self, m: f64, z: bool) -> (f64, f64) {
        (self.mean(!z) + self.rho * (m - self.mean(z)), (1.0 - self.rho * self.rho) * self.var)
    }

    /// Standard deviation of `M(1̲_t) - M(0̲_t)`.
    pub fn difference_sd(&self) -> f64 {
        (2.0 * (1.0 - self.rho) * self.var).sqrt()
    }
}

fn check_period(p: &ModelParams, t: usize) -> Result<(), PceError> {
    if t == 0 || t > p.n_periods() {
        return Err(PceError::Period { period: t, detail: format!("model has periods 1..={}", p.n_periods()) });
    }
    Ok(())
}

/// Law of the potential mediators at period `t` with cross-world correlation `rho`.
pub fn joint_mediator_law(p: &ModelParams, t: usize, rho: f64) -> Result<JointMediatorLaw, PceError> {
    check_period(p, t)?;
    let mu0 = p.eta1_at(t);
    JointMediatorLaw::new(mu0, mu0 + p.gamma1, p.mediator_variance(), rho)
}

/// `P(M(1̲_t) - M(0̲_t) ∈ [a, b))`.
pub fn strata_probability(law: &JointMediatorLaw, interval: Interval) -> f64 {
    let s = law.difference_sd();
    let shift = law.mu1 - law.mu0;
    let lo = (interval.lo - shift) / s;
    let hi = (interval.hi - shift) / s;
    // Subtract in the tail that keeps precision.
    let p = if lo > 0.0 { std_normal_sf(lo) - std_normal_sf(hi) } else { std_normal_cdf(hi) - std_normal_cdf(lo) };
    p.clamp(0.0, 1.0)
}

/// Outcome-model quantities at one period that do not depend on `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeKernel {
    eta2: f64,
    beta1: f64,
    beta2: f64,
    beta3: f64,
    mu0: f64,
    mu1: f64,
    /// `c / v`, the regression of `α_2j + φ_2ij` on the mediator.
    slope: f64,
    cond_var: f64,
}

impl OutcomeKernel {
    pub fn new(p: &ModelParams, t: usize) -> Result<Self, PceError> {
        check_period(p, t)?;
        let eta2 = p.eta2_at(t).ok_or_else(|| PceError::Period {
            period: t,
            detail: format!("no outcome model (outcome periods {:?})", p.outcome_periods),
        })?;
        let v = p.mediator_variance();
        if !(v > 0.0) {
            return Err(PceError::Degenerate("mediator variance is zero".into()));
        }
        let c = p.alpha.cov12() + p.phi.cov12();
        let w = p.alpha.var2() + p.phi.var2();
        let mut cond_var = w - c * c / v;
        if cond_var < -VARIANCE_SLACK {
            return Err(PceError::Covariance(cond_var));
        }
        cond_var = cond_var.max(0.0);
        let mu0 = p.eta1_at(t);
        Ok(Self { eta2, beta1: p.beta1, beta2: p.beta2, beta3: p.beta3, mu0, mu1: mu0 + p.gamma1, slope: c / v, cond_var })
    }

    /// `E(Y_ijt | M_ijt = m, Z̄_jt = z̲_t)` by Gauss-Hermite quadrature over
    /// the conditional law of the outcome random effects.
    pub fn mean(&self, m: f64, z: bool, rule: &GaussHermiteRule) -> f64 {
        let zf = f64::from(u8::from(z));
        let mu = if z { self.mu1 } else { self.mu0 };
        let linear = self.eta2 + self.beta1 * zf + self.beta2 * m + self.beta3 * m * zf;
        rule.expect(self.slope * (m - mu), self.cond_var, |u| expit(linear + u))
    }
}

/// `E(Y_ijt | M_ijt = m, Z̄_jt = z̲_t)` with the default 20-node rule.
pub fn conditional_outcome_mean(p: &ModelParams, t: usize, m: f64, z: bool) -> Result<f64, PceError> {
    Ok(OutcomeKernel::new(p, t)?.mean(m, z, GaussHermiteRule::default_rule()))
}

/// Solution of the convolution equation for `Δ_ijt(m, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaSolution {
    pub delta: f64,
    /// `f(Δ)`: convolution minus the observed conditional mean.
    pub residual: f64,
}

/// Defining equation `f(Δ) = ∫ g⁻¹(Δ + λ m*) dP(m* | M(z̲_t) = m) - E(Y | m, z̲_t)`.
#[derive(Debug, Clone, Copy)]
pub struct Convolution<'a> {
    pub target: f64,
    pub cross_mean: f64,
    pub cross_var: f64,
    pub lambda: f64,
    pub link: Link,
    pub rule: &'a GaussHermiteRule,
}

impl Convolution<'_> {
    pub fn value_and_slope(&self, delta: f64) -> (f64, f64) {
        let scale = (2.0 * self.cross_var).sqrt();
        let mut f = -self.target;
        let mut df = 0.0;
        for (&s, &w) in self.rule.nodes().iter().zip(self.rule.normalized_weights()) {
            let x = delta + self.lambda * (self.cross_mean + scale * s);
            f += w * self.link.inverse(x);
            df += w * self.link.inverse_prime(x);
        }
        (f, df)
    }

    /// Newton-Raphson from `start`.
    pub fn newton(&self, start: f64, cfg: &NewtonConfig) -> Result<DeltaSolution, PceError> {
        let delta = newton_solve_fdf(|d| self.value_and_slope(d), start, cfg)?;
        Ok(DeltaSolution { delta, residual: self.value_and_slope(delta).0 })
    }

    /// `logit(E_Y) - λ E(m*)` for the logit link, `E_Y - λ E(m*)` for the identity.
    pub fn start(&self) -> f64 {
        match self.link {
            Link::Logit => {
                // A saturated mean has no finite root; start far out and let Newton report it.
                let base = logit(self.target).unwrap_or(if self.target >= 0.5 { 40.0 } else { -40.0 });
                base - self.lambda * self.cross_mean
            }
            Link::Identity => self.target - self.lambda * self.cross_mean,
        }
    }
}

/// Everything needed to evaluate `Δ(m, z)` for one draw, period, `ρ` and `λ_z`.
#[derive(Debug, Clone, Copy)]
pub struct DeltaProblem<'a> {
    pub kernel: &'a OutcomeKernel,
    pub law: &'a JointMediatorLaw,
    pub z: bool,
    pub lambda: f64,
    pub link: Link,
    pub rule: &'a GaussHermiteRule,
}

impl<'a> DeltaProblem<'a> {
    pub fn convolution(&self, m: f64) -> Convolution<'a> {
        let (cross_mean, cross_var) = self.law.cross_world(m, self.z);
        Convolution {
            target: self.kernel.mean(m, self.z, self.rule),
            cross_mean,
            cross_var,
            lambda: self.lambda,
            link: self.link,
            rule: self.rule,
        }
    }

    /// Newton for the logit link; the closed form for the identity link.
    pub fn solve(&self, m: f64) -> Result<DeltaSolution, PceError> {
        let conv = self.convolution(m);
        match self.link {
            Link::Identity => {
                let delta = conv.start();
                Ok(DeltaSolution { delta, residual: conv.value_and_slope(delta).0 })
            }
            Link::Logit => conv.newton(conv.start(), &NewtonConfig::default()),
        }
    }
}

/// `Δ_ijt(m, z)` for posterior parameters `p` at period `t`.
pub fn solve_delta(p: &ModelParams, t: usize, m: f64, z: bool, lambda: f64, law: &JointMediatorLaw, link: Link) -> Result<DeltaSolution, PceError> {
    let kernel = OutcomeKernel::new(p, t)?;
    DeltaProblem { kernel: &kernel, law, z, lambda, link, rule: GaussHermiteRule::default_rule() }.solve(m)
}
