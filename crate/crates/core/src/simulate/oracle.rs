//! Brute-force principal causal effect for a known truth.
//!
//! Everything here is deliberately naive and independent of the estimation
//! engine: trapezoid integrals on wide uniform grids, bisection for the
//! stratum intercept, unconditioned bivariate-normal sampling followed by
//! filtering.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{SimulateError, TruthParams};
use crate::model::Link;
use crate::numerics::{std_normal_cdf, stream_rng, Interval, NumericsError};

/// Smallest stratum probability the oracle accepts.
pub const MIN_ORACLE_STRATUM: f64 = 1e-6;

/// Grid sizes of the oracle's integrators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleResolution {
    /// Points in the trapezoid rule for `E(Y | m, z)` over the random effect.
    pub outcome_points: usize,
    /// Points in the trapezoid rule for the convolution over `m*`.
    pub convolution_points: usize,
    /// Points of the `m` grid on which the intercept is tabulated.
    pub mediator_grid: usize,
    /// Half-width of every grid in standard deviations.
    pub width_sd: f64,
}

impl Default for OracleResolution {
    fn default() -> Self {
        Self { outcome_points: 2001, convolution_points: 801, mediator_grid: 2049, width_sd: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleEstimate {
    pub pce: f64,
    pub mc_se: f64,
    /// Closed-form probability of the stratum under the truth.
    pub strata_probability: f64,
    /// Number of sampled pairs that fell in the stratum.
    pub accepted: usize,
}

/// `∫ f(x) N(x; mean, sd²) dx` by the trapezoid rule on `mean ± width·sd`.
fn trapezoid_gauss(mean: f64, sd: f64, points: usize, width: f64, f: impl Fn(f64) -> f64) -> f64 {
    if sd == 0.0 {
        return f(mean);
    }
    let h = 2.0 * width / (points - 1) as f64;
    let mut acc = 0.0;
    for k in 0..points {
        let x = -width + h * k as f64;
        let w = if k == 0 || k == points - 1 { 0.5 } else { 1.0 };
        acc += w * (-0.5 * x * x).exp() * f(mean + sd * x);
    }
    acc * h / (2.0 * std::f64::consts::PI).sqrt()
}

/// PCE machinery for one truth and period, reusable across strata.
#[derive(Debug, Clone)]
pub struct PceOracle {
    mu: [f64; 2],
    var: f64,
    rho: f64,
    lambda: [f64; 2],
    link: Link,
    /// Tabulated intercept per arm on `grid_lo[z] + k·grid_step[z]`.
    delta: [Vec<f64>; 2],
    grid_lo: [f64; 2],
    grid_step: [f64; 2],
    resolution: OracleResolution,
    outcome: OutcomeLaw,
}

#[derive(Debug, Clone, Copy)]
struct OutcomeLaw {
    eta2: f64,
    beta: [f64; 3],
    cov: f64,
    w: f64,
}

impl PceOracle {
    pub fn new(truth: &TruthParams, t: usize) -> Result<Self, SimulateError> {
        Self::with_resolution(truth, t, OracleResolution::default())
    }

    pub fn with_resolution(truth: &TruthParams, t: usize, resolution: OracleResolution) -> Result<Self, SimulateError> {
        truth.check()?;
        if truth.mediator_lag != 0 {
            return Err(SimulateError::Design("the PCE oracle needs the contemporaneous mediator".into()));
        }
        let p = &truth.params;
        if t == 0 || t > p.n_periods() {
            return Err(SimulateError::Design(format!("period {t} outside 1..={}", p.n_periods())));
        }
        let eta2 = p.eta2_at(t).ok_or_else(|| SimulateError::Design(format!("no outcome model at period {t}")))?;
        let mu = [p.eta1[t - 1], p.eta1[t - 1] + p.gamma1];
        let var = p.mediator_variance();
        if !(var > 0.0) {
            return Err(SimulateError::Design("mediator variance must be positive".into()));
        }
        let outcome = OutcomeLaw {
            eta2,
            beta: [p.beta1, p.beta2, p.beta3],
            cov: p.alpha.cov12() + p.phi.cov12(),
            w: p.alpha.var2() + p.phi.var2(),
        };
        let mut oracle = Self {
            mu,
            var,
            rho: truth.rho,
            lambda: [truth.lambda0, truth.lambda1],
            link: truth.link,
            delta: [Vec::new(), Vec::new()],
            grid_lo: [0.0; 2],
            grid_step: [0.0; 2],
            resolution,
            outcome,
        };
        let sd = var.sqrt();
        let half = 9.0 * sd;
        for z in 0..2 {
            let n = resolution.mediator_grid;
            let lo = mu[z] - half;
            let step = 2.0 * half / (n - 1) as f64;
            let table = (0..n).map(|k| oracle.solve_delta(lo + step * k as f64, z)).collect::<Result<Vec<_>, _>>()?;
            oracle.delta[z] = table;
            oracle.grid_lo[z] = lo;
            oracle.grid_step[z] = step;
        }
        Ok(oracle)
    }

    /// `E(Y | M = m, z)`, integrating the outcome random effect given `M = m`.
    pub fn outcome_mean(&self, m: f64, z: usize) -> f64 {
        let o = &self.outcome;
        let zf = z as f64;
        let cond_mean = o.cov / self.var * (m - self.mu[z]);
        let cond_var = (o.w - o.cov * o.cov / self.var).max(0.0);
        let base = o.eta2 + o.beta[0] * zf + o.beta[1] * m + o.beta[2] * m * zf;
        let r = &self.resolution;
        trapezoid_gauss(cond_mean, cond_var.sqrt(), r.outcome_points, r.width_sd, |u| 1.0 / (1.0 + (-(base + u)).exp()))
    }

    /// `∫ g⁻¹(Δ + λ_z m*) dP(m* | M(z) = m)`.
    fn convolution(&self, delta: f64, m: f64, z: usize) -> f64 {
        let mean = self.mu[1 - z] + self.rho * (m - self.mu[z]);
        let sd = ((1.0 - self.rho * self.rho) * self.var).sqrt();
        let lam = self.lambda[z];
        let r = &self.resolution;
        let link = self.link;
        trapezoid_gauss(mean, sd, r.convolution_points, r.width_sd, |x| match link {
            Link::Logit => 1.0 / (1.0 + (-(delta + lam * x)).exp()),
            Link::Identity => delta + lam * x,
        })
    }

    /// Bisection on the monotone convolution equation.
    fn solve_delta(&self, m: f64, z: usize) -> Result<f64, SimulateError> {
        let target = self.outcome_mean(m, z);
        let g = |d: f64| self.convolution(d, m, z) - target;
        let (mut lo, mut hi) = (-1.0, 1.0);
        let mut expand = 0;
        while g(lo) > 0.0 {
            lo *= 2.0;
            expand += 1;
            if expand > 60 {
                return Err(NumericsError::Domain(format!("cannot bracket the intercept at m = {m}")).into());
            }
        }
        while g(hi) < 0.0 {
            hi *= 2.0;
            expand += 1;
            if expand > 60 {
                return Err(NumericsError::Domain(format!("cannot bracket the intercept at m = {m}")).into());
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-13 * (1.0 + mid.abs()) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Intercept at `m` for arm `z`: linear interpolation inside the table,
    /// direct bisection outside it.
    pub fn delta(&self, m: f64, z: usize) -> Result<f64, SimulateError> {
        let table = &self.delta[z];
        let pos = (m - self.grid_lo[z]) / self.grid_step[z];
        if pos < 0.0 || pos > (table.len() - 1) as f64 {
            return self.solve_delta(m, z);
        }
        let k = (pos.floor() as usize).min(table.len() - 2);
        let f = pos - k as f64;
        Ok(table[k] * (1.0 - f) + table[k + 1] * f)
    }

    /// Closed-form probability that `M(1) - M(0)` lands in `interval`.
    pub fn strata_probability(&self, interval: Interval) -> f64 {
        let s = (2.0 * (1.0 - self.rho) * self.var).sqrt();
        let shift = self.mu[1] - self.mu[0];
        std_normal_cdf((interval.hi - shift) / s) - std_normal_cdf((interval.lo - shift) / s)
    }

    /// Monte Carlo PCE over `interval` from `mc_size` unconditioned pairs.
    pub fn estimate(&self, interval: Interval, mc_size: usize, seed: u64) -> Result<OracleEstimate, SimulateError> {
        if mc_size < 10_000 {
            return Err(SimulateError::Design(format!("oracle needs mc_size ≥ 10000, got {mc_size}")));
        }
        let prob = self.strata_probability(interval);
        if !(prob >= MIN_ORACLE_STRATUM) {
            return Err(NumericsError::DegenerateStratum { probability: prob }.into());
        }
        let mut rng = stream_rng(seed, &[0x4f52_4143]);
        let sd = self.var.sqrt();
        let c = (1.0 - self.rho * self.rho).sqrt();
        let (mut n, mut sum, mut sum_sq) = (0usize, 0.0, 0.0);
        for _ in 0..mc_size {
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            let m0 = self.mu[0] + sd * e1;
            let m1 = self.mu[1] + sd * (self.rho * e1 + c * e2);
            let d = m1 - m0;
            if d < interval.lo || d > interval.hi {
                continue;
            }
            let treated = self.link.inverse(self.delta(m1, 1)? + self.lambda[1] * m0);
            let control = self.link.inverse(self.delta(m0, 0)? + self.lambda[0] * m1);
            let x = treated - control;
            n += 1;
            sum += x;
            sum_sq += x * x;
        }
        if n < 2 {
            return Err(NumericsError::DegenerateStratum { probability: prob }.into());
        }
        let mean = sum / n as f64;
        let var = ((sum_sq - n as f64 * mean * mean) / (n - 1) as f64).max(0.0);
        Ok(OracleEstimate { pce: mean, mc_se: (var / n as f64).sqrt(), strata_probability: prob, accepted: n })
    }
}

/// One-shot oracle: PCE of stratum `interval` at period `t` under `truth`.
pub fn true_pce_oracle(truth: &TruthParams, t: usize, interval: Interval, mc_size: usize, seed: u64) -> Result<f64, SimulateError> {
    Ok(PceOracle::new(truth, t)?.estimate(interval, mc_size, seed)?.pce)
}
