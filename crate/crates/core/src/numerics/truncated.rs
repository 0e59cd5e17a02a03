//! Exact sampling of a Gaussian pair conditioned on its difference.

use rand::Rng;
use rand_distr::StandardNormal;

use super::rng::stream_rng;
use super::special::{std_normal_cdf, std_normal_quantile};
use super::{Interval, NumericsError};

/// Strata below this probability are rejected by the sampler.
pub const MIN_STRATUM_PROBABILITY: f64 = 1e-12;

/// Inverse-CDF sampler for `N(mean, sd²)` restricted to `[lo, hi]`.
///
/// Intervals lying in the upper half are reflected into the lower half so
/// that both CDF endpoints are small numbers with full relative precision.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedNormal {
    mean: f64,
    sd: f64,
    flip: bool,
    lo_z: f64,
    hi_z: f64,
    p_lo: f64,
    p_hi: f64,
}

impl TruncatedNormal {
    pub fn new(mean: f64, sd: f64, interval: Interval) -> Result<Self, NumericsError> {
        if !(sd > 0.0 && sd.is_finite() && mean.is_finite()) {
            return Err(NumericsError::Domain(format!("truncated normal needs sd > 0, got {sd}")));
        }
        let mut lo_z = (interval.lo - mean) / sd;
        let mut hi_z = (interval.hi - mean) / sd;
        let flip = lo_z > 0.0;
        if flip {
            (lo_z, hi_z) = (-hi_z, -lo_z);
        }
        let p_lo = std_normal_cdf(lo_z);
        let p_hi = std_normal_cdf(hi_z);
        let mass = p_hi - p_lo;
        if !(mass >= MIN_STRATUM_PROBABILITY) {
            return Err(NumericsError::DegenerateStratum { probability: mass.max(0.0) });
        }
        Ok(Self { mean, sd, flip, lo_z, hi_z, p_lo, p_hi })
    }

    /// Probability mass of the truncation region.
    pub fn mass(&self) -> f64 {
        self.p_hi - self.p_lo
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let p = self.p_lo + u * (self.p_hi - self.p_lo);
        let mut z = std_normal_quantile(p).clamp(self.lo_z, self.hi_z);
        if self.flip {
            z = -z;
        }
        self.mean + self.sd * z
    }
}

/// Draw `count` pairs `(m0, m1)` from the bivariate normal with means
/// `(mean0, mean1)`, common variance `var` and correlation `rho`, conditioned
/// on `m1 - m0 ∈ interval`.
///
/// The difference `D = m1 - m0 ~ N(mean1 - mean0, 2(1-rho) var)` is drawn by
/// inverse CDF on the truncation region, then `m0 | D ~ N(mean0 - (D - δ)/2,
/// var (1+rho)/2)` and `m1 = m0 + D`.
pub fn sample_strata_pair(
    mean0: f64,
    mean1: f64,
    var: f64,
    rho: f64,
    interval: Interval,
    count: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>, NumericsError> {
    let mut rng = stream_rng(seed, &[]);
    let sampler = StrataPairSampler::new(mean0, mean1, var, rho, interval)?;
    Ok((0..count).map(|_| sampler.sample(&mut rng)).collect())
}

/// Reusable form of [`sample_strata_pair`].
#[derive(Debug, Clone, Copy)]
pub struct StrataPairSampler {
    diff: TruncatedNormal,
    mean0: f64,
    shift: f64,
    cond_sd: f64,
    interval: Interval,
}

impl StrataPairSampler {
    pub fn new(mean0: f64, mean1: f64, var: f64, rho: f64, interval: Interval) -> Result<Self, NumericsError> {
        if !(var > 0.0 && var.is_finite()) {
            return Err(NumericsError::Domain(format!("pair variance must be positive, got {var}")));
        }
        if !(rho.abs() < 1.0) {
            return Err(NumericsError::Domain(format!("pair correlation must lie in (-1, 1), got {rho}")));
        }
        let shift = mean1 - mean0;
        let diff = TruncatedNormal::new(shift, (2.0 * (1.0 - rho) * var).sqrt(), interval)?;
        Ok(Self { diff, mean0, shift, cond_sd: (0.5 * var * (1.0 + rho)).sqrt(), interval })
    }

    pub fn stratum_mass(&self) -> f64 {
        self.diff.mass()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let d = self.diff.sample(rng).clamp(self.interval.lo, self.interval.hi);
        let e: f64 = rng.sample(StandardNormal);
        let m0 = self.mean0 - 0.5 * (d - self.shift) + self.cond_sd * e;
        (m0, m0 + d)
    }
}
