//! Monte Carlo evaluation of PCEs per posterior draw, and the posterior loop.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::identify::{joint_mediator_law, strata_probability, DeltaProblem, JointMediatorLaw, OutcomeKernel};
use super::PceError;
use crate::calibration::SensitivityConfig;
use crate::model::{Link, ModelParams};
use crate::numerics::{stream_rng, GaussHermiteRule, Interval, MonotoneCubic, StrataPairSampler};
use crate::sampler::PosteriorDraws;

/// Strata lighter than this are not estimated.
pub const MIN_STRATUM_PROBABILITY: f64 = 1e-8;
/// Fraction of failed cells above which the whole run fails.
pub const MAX_FAILURE_RATE: f64 = 0.05;
/// Nodes of the interpolated Δ table.
pub const DELTA_GRID_POINTS: usize = 96;
/// Half-width of the Δ table in marginal standard deviations.
pub const DELTA_GRID_HALF_WIDTH: f64 = 6.0;

const STREAM_PCE: u64 = 0x5043_45;

/// The three default strata: `|M(1) - M(0)| ≤ δ`, below `-δ`, above `δ`.
pub fn default_intervals(delta: f64) -> Vec<Interval> {
    vec![
        Interval { lo: -delta, hi: delta },
        Interval { lo: f64::NEG_INFINITY, hi: -delta },
        Interval { lo: delta, hi: f64::INFINITY },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PceQuery {
    /// Periods to evaluate; empty means every outcome period of the draws.
    pub periods: Vec<usize>,
    pub intervals: Vec<Interval>,
    /// Truncated pairs per draw and stratum.
    pub mc_size: usize,
    pub link: Link,
    pub quadrature_order: usize,
    /// Solve Δ at every sampled pair instead of interpolating a table.
    pub exact_delta: bool,
    /// Use every `thin`-th draw of each chain.
    pub thin: usize,
    pub seed: u64,
}

impl Default for PceQuery {
    fn default() -> Self {
        Self {
            periods: Vec::new(),
            intervals: default_intervals(0.5),
            mc_size: 2000,
            link: Link::Logit,
            quadrature_order: 20,
            exact_delta: false,
            thin: 1,
            seed: 0,
        }
    }
}

impl PceQuery {
    pub fn check(&self) -> Result<(), PceError> {
        if self.mc_size < 100 {
            return Err(PceError::Config(format!("mc_size must be at least 100, got {}", self.mc_size)));
        }
        if self.intervals.is_empty() {
            return Err(PceError::Config("no intervals".into()));
        }
        if let Some(iv) = self.intervals.iter().find(|iv| !(iv.lo < iv.hi)) {
            return Err(PceError::Config(format!("empty interval {iv}")));
        }
        if self.thin == 0 {
            return Err(PceError::Config("thin must be at least 1".into()));
        }
        GaussHermiteRule::new(self.quadrature_order)?;
        Ok(())
    }

    fn rule(&self) -> Result<GaussHermiteRule, PceError> {
        Ok(GaussHermiteRule::new(self.quadrature_order)?)
    }

    /// Label of interval `k`: `I1`, `I2`, ...
    pub fn label(k: usize) -> String {
        format!("I{}", k + 1)
    }
}

/// One PCE evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PceValue {
    /// Mean treated-minus-control contrast over the truncated pairs.
    pub numerator: f64,
    /// Stratum probability.
    pub denominator: f64,
    pub pce: f64,
    pub mc_se: f64,
}

enum DeltaMap<'a> {
    Table(MonotoneCubic, DeltaProblem<'a>),
    Exact(DeltaProblem<'a>),
}

impl DeltaMap<'_> {
    fn eval(&self, m: f64) -> Result<f64, PceError> {
        match self {
            Self::Table(table, problem) if !table.contains(m) => Ok(problem.solve(m)?.delta),
            Self::Table(table, _) => Ok(table.eval(m)),
            Self::Exact(problem) => Ok(problem.solve(m)?.delta),
        }
    }
}

/// Per-draw state shared by every stratum: the mediator law and both Δ maps.
struct DrawContext<'a> {
    law: &'a JointMediatorLaw,
    link: Link,
    lambda0: f64,
    lambda1: f64,
    delta0: DeltaMap<'a>,
    delta1: DeltaMap<'a>,
}

impl<'a> DrawContext<'a> {
    fn new(
        kernel: &'a OutcomeKernel,
        law: &'a JointMediatorLaw,
        lambda0: f64,
        lambda1: f64,
        query: &PceQuery,
        rule: &'a GaussHermiteRule,
    ) -> Result<Self, PceError> {
        let build = |z: bool, lambda: f64| -> Result<DeltaMap<'a>, PceError> {
            let problem = DeltaProblem { kernel, law, z, lambda, link: query.link, rule };
            if query.exact_delta {
                return Ok(DeltaMap::Exact(problem));
            }
            let half = DELTA_GRID_HALF_WIDTH * law.var.sqrt();
            let (lo, hi) = (law.mean(z) - half, law.mean(z) + half);
            let step = (hi - lo) / (DELTA_GRID_POINTS - 1) as f64;
            let values = (0..DELTA_GRID_POINTS)
                .map(|k| problem.solve(lo + step * k as f64).map(|s| s.delta))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(DeltaMap::Table(MonotoneCubic::new(lo, hi, values), problem))
        };
        Ok(Self { law, link: query.link, lambda0, lambda1, delta0: build(false, lambda0)?, delta1: build(true, lambda1)? })
    }

    fn estimate<R: Rng + ?Sized>(&self, interval: Interval, mc_size: usize, rng: &mut R) -> Result<PceValue, PceError> {
        let denominator = strata_probability(self.law, interval);
        if !(denominator > MIN_STRATUM_PROBABILITY) {
            return Err(PceError::DegenerateStratum { probability: denominator });
        }
        let sampler = StrataPairSampler::new(self.law.mu0, self.law.mu1, self.law.var, self.law.rho, interval)?;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..mc_size {
            let (m0, m1) = sampler.sample(rng);
            let treated = self.link.inverse(self.delta1.eval(m1)? + self.lambda1 * m0);
            let control = self.link.inverse(self.delta0.eval(m0)? + self.lambda0 * m1);
            let d = treated - control;
            sum += d;
            sum_sq += d * d;
        }
        let n = mc_size as f64;
        let mean = sum / n;
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        Ok(PceValue { numerator: mean, denominator, pce: mean, mc_se: (var / n).sqrt() })
    }
}

/// PCE over one interval for one parameter draw, period and sensitivity setting.
///
/// Pairs `(m_0, m_1)` come from the copula law already conditioned on the
/// stratum, so the estimate is the average treated-minus-control contrast.
pub fn pce_for_draw(
    p: &ModelParams,
    t: usize,
    rho: f64,
    query: &PceQuery,
    lambda0: f64,
    lambda1: f64,
    interval: Interval,
) -> Result<PceValue, PceError> {
    query.check()?;
    let rule = query.rule()?;
    let law = joint_mediator_law(p, t, rho)?;
    let kernel = OutcomeKernel::new(p, t)?;
    let ctx = DrawContext::new(&kernel, &law, lambda0, lambda1, query, &rule)?;
    let mut rng = stream_rng(query.seed, &[STREAM_PCE]);
    ctx.estimate(interval, query.mc_size, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PceRecord {
    pub period: usize,
    /// Index into the query's intervals.
    pub interval: usize,
    pub rho: f64,
    pub draw: usize,
    pub lambda0: f64,
    pub lambda1: f64,
    pub value: PceValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PceSummary {
    pub period: usize,
    pub interval: String,
    pub bounds: Interval,
    pub rho: f64,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
    pub mean_denominator: f64,
    pub n_draws: usize,
    pub n_failed: usize,
    /// Draws whose stratum had no mass.
    pub n_empty: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub draw: usize,
    pub period: usize,
    pub rho: f64,
    pub interval: Option<usize>,
    /// The stratum has (numerically) no mass under this draw's law.
    pub empty: bool,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PceEstimate {
    pub intervals: Vec<Interval>,
    pub records: Vec<PceRecord>,
    pub summaries: Vec<PceSummary>,
    pub failures: Vec<CellFailure>,
}

impl PceEstimate {
    pub fn summary(&self, period: usize, interval: usize, rho: f64) -> Option<&PceSummary> {
        let label = PceQuery::label(interval);
        self.summaries.iter().find(|s| s.period == period && s.interval == label && s.rho == rho)
    }
}

/// Type-7 quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// PCEs for every posterior draw, `ρ` in the grid, interval and period.
///
/// Each draw is paired with one `(λ_0, λ_1)` draw shared across cells; each
/// (draw, ρ, interval, period) cell has its own random stream, so the output
/// does not depend on thread scheduling.
pub fn pce_posterior(draws: &PosteriorDraws, cfg: &SensitivityConfig, query: &PceQuery) -> Result<PceEstimate, PceError> {
    query.check()?;
    cfg.check()?;
    if draws.is_empty() {
        return Err(PceError::Config("no posterior draws".into()));
    }
    let draws = draws.thinned(query.thin);
    let periods = if query.periods.is_empty() { draws.outcome_periods().to_vec() } else { query.periods.clone() };
    if let Some(&t) = periods.iter().find(|t| !draws.outcome_periods().contains(t)) {
        return Err(PceError::Period { period: t, detail: format!("no outcome model (outcome periods {:?})", draws.outcome_periods()) });
    }
    let rule = query.rule()?;
    let n_intervals = query.intervals.len();

    let per_draw: Vec<(Vec<PceRecord>, Vec<CellFailure>)> = (0..draws.len())
        .into_par_iter()
        .map(|s| {
            let p = draws.params(s);
            let (lambda0, lambda1) = cfg.lambda_for_draw(query.seed, s, Some((p.beta2, p.beta2 + p.beta3)));
            let mut records = Vec::new();
            let mut failures = Vec::new();
            for &t in &periods {
                for (r, &rho) in cfg.rho_grid.iter().enumerate() {
                    let fail = |interval: Option<usize>, e: PceError| CellFailure {
                        draw: s,
                        period: t,
                        rho,
                        interval,
                        empty: matches!(e, PceError::DegenerateStratum { .. }),
                        message: e.to_string(),
                    };
                    let setup = joint_mediator_law(&p, t, rho).and_then(|law| Ok((law, OutcomeKernel::new(&p, t)?)));
                    let (law, kernel) = match setup {
                        Ok(x) => x,
                        Err(e) => {
                            failures.extend((0..n_intervals).map(|k| fail(Some(k), e.clone())));
                            continue;
                        }
                    };
                    let ctx = match DrawContext::new(&kernel, &law, lambda0, lambda1, query, &rule) {
                        Ok(c) => c,
                        Err(e) => {
                            failures.extend((0..n_intervals).map(|k| fail(Some(k), e.clone())));
                            continue;
                        }
                    };
                    for (k, &interval) in query.intervals.iter().enumerate() {
                        let mut rng = stream_rng(query.seed, &[STREAM_PCE, s as u64, r as u64, k as u64, t as u64]);
                        match ctx.estimate(interval, query.mc_size, &mut rng) {
                            Ok(value) => records.push(PceRecord { period: t, interval: k, rho, draw: s, lambda0, lambda1, value }),
                            Err(e) => failures.push(fail(Some(k), e)),
                        }
                    }
                }
            }
            (records, failures)
        })
        .collect();

    let mut records: Vec<PceRecord> = Vec::new();
    let mut failures: Vec<CellFailure> = Vec::new();
    for (r, f) in per_draw {
        records.extend(r);
        failures.extend(f);
    }
    // Empty strata are a property of the law, not a numerical failure.
    let total = draws.len() * periods.len() * cfg.rho_grid.len() * n_intervals;
    let numerical: Vec<&CellFailure> = failures.iter().filter(|f| !f.empty).collect();
    if numerical.len() as f64 > MAX_FAILURE_RATE * total as f64 {
        return Err(PceError::TooManyFailures { failed: numerical.len(), total, first: numerical[0].message.clone() });
    }
    for f in &numerical {
        log::warn!("draw {} period {} rho {}: {}", f.draw, f.period, f.rho, f.message);
    }
    let n_empty = failures.len() - numerical.len();
    if n_empty > 0 {
        log::warn!("{n_empty} of {total} cells skipped: stratum probability below {MIN_STRATUM_PROBABILITY:e}");
    }
    let rho_index = |rho: f64| cfg.rho_grid.iter().position(|&r| r == rho).unwrap_or(usize::MAX);
    records.sort_by_key(|r| (r.period, r.interval, rho_index(r.rho), r.draw));

    let mut summaries = Vec::new();
    for &t in &periods {
        for k in 0..n_intervals {
            for &rho in &cfg.rho_grid {
                let cell: Vec<&PceRecord> = records.iter().filter(|r| r.period == t && r.interval == k && r.rho == rho).collect();
                let in_cell = |f: &&CellFailure| f.period == t && f.interval == Some(k) && f.rho == rho;
                let n_failed = failures.iter().filter(in_cell).filter(|f| !f.empty).count();
                let n_empty = failures.iter().filter(in_cell).filter(|f| f.empty).count();
                if cell.is_empty() {
                    continue;
                }
                let mut values: Vec<f64> = cell.iter().map(|r| r.value.pce).collect();
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let mean_denominator = cell.iter().map(|r| r.value.denominator).sum::<f64>() / n;
                values.sort_by(f64::total_cmp);
                summaries.push(PceSummary {
                    period: t,
                    interval: PceQuery::label(k),
                    bounds: query.intervals[k],
                    rho,
                    mean,
                    q025: quantile(&values, 0.025),
                    q975: quantile(&values, 0.975),
                    mean_denominator,
                    n_draws: values.len(),
                    n_failed,
                    n_empty,
                });
            }
        }
    }
    Ok(PceEstimate { intervals: query.intervals.clone(), records, summaries, failures })
}

/// PCEs over the default three-interval family for each cutoff `δ`.
pub fn pce_delta_sweep(draws: &PosteriorDraws, cfg: &SensitivityConfig, query: &PceQuery, deltas: &[f64]) -> Result<Vec<(f64, PceEstimate)>, PceError> {
    deltas
        .iter()
        .map(|&d| {
            if !(d > 0.0) {
                return Err(PceError::Config(format!("cutoff must be positive, got {d}")));
            }
            let q = PceQuery { intervals: default_intervals(d), ..query.clone() };
            Ok((d, pce_posterior(draws, cfg, &q)?))
        })
        .collect()
}

/// Cutoffs 0.5, 1, ..., 3.
pub fn default_deltas() -> Vec<f64> {
    (1..=6).map(|k| 0.5 * k as f64).collect()
}
