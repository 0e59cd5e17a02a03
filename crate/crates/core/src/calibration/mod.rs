//! Calibration of the sensitivity parameters `(ρ, λ_0, λ_1)`.
//!
//! Cross-world information comes from the transition set
//! `C = {(i, j, t) : Z_j,t-1 = 0, Z_jt = 1}`, where the same individual is seen
//! under control and then under treatment in consecutive periods:
//!
//! * `ρ*` is the sample correlation of `(M_ij,t-1, M_ijt)` over `C`;
//! * `λ_0` runs from the `M_ijt` slope in a logistic fit of `Y_ij,t-1` to the
//!   posterior mean of `β_2`;
//! * `λ_1` runs from the `M_ij,t-1` slope in a logistic fit of `Y_ijt` to the
//!   posterior mean of `β_2 + β_3`.

mod glm;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{observed_rows, LaggedView, TrialDataset};
use crate::numerics::{stream_rng, StreamRng};
use crate::sampler::PosteriorDraws;

pub use glm::{fit_logistic, LogisticFit, SCORE_TOLERANCE};

/// Minimum number of transition pairs for a correlation estimate.
pub const MIN_PAIRS: usize = 3;
/// Top of the sensitivity grid for `ρ`.
pub const RHO_GRID_MAX: f64 = 0.9;

const STREAM_LAMBDA: u64 = 0x4c41_4d;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("transition set has {found} complete pairs{}, need at least {MIN_PAIRS}", period.map(|t| format!(" at period {t}")).unwrap_or_default())]
    InsufficientPairs { found: usize, period: Option<usize> },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("{model}: complete separation detected after {iterations} IRLS iterations")]
    Separation { model: &'static str, iterations: usize },
    #[error("{model}: design matrix has rank {rank} < {columns}")]
    Rank { model: &'static str, rank: usize, columns: usize },
    #[error("{model}: IRLS did not converge in {iterations} iterations")]
    NonConvergence { model: &'static str, iterations: usize },
    #[error("no posterior draws")]
    NoDraws,
    #[error("invalid sensitivity configuration: {0}")]
    Config(String),
}

/// One complete observation in the transition set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionPair {
    pub period: usize,
    pub mediator_prev: f64,
    pub mediator: f64,
    pub outcome_prev: bool,
    pub outcome: bool,
}

/// Rows with `Z_j,t-1 = 0`, `Z_jt = 1` whose current and previous `(M, Y)` are observed.
pub fn transition_pairs(view: &LaggedView) -> Vec<TransitionPair> {
    view.rows
        .iter()
        .filter(|r| r.treatment && !r.prev_treatment)
        .filter_map(|r| {
            r.lag.map(|lag| TransitionPair {
                period: r.period,
                mediator_prev: lag.mediator,
                mediator: r.mediator,
                outcome_prev: lag.outcome,
                outcome: r.outcome,
            })
        })
        .collect()
}

/// Sample correlation with means taken over the same pairs.
fn pair_correlation(pairs: &[TransitionPair]) -> Result<f64, CalibrationError> {
    let n = pairs.len() as f64;
    let mu0 = pairs.iter().map(|p| p.mediator_prev).sum::<f64>() / n;
    let mu1 = pairs.iter().map(|p| p.mediator).sum::<f64>() / n;
    let (mut s00, mut s11, mut s01) = (0.0, 0.0, 0.0);
    for p in pairs {
        let (a, b) = (p.mediator_prev - mu0, p.mediator - mu1);
        s00 += a * a;
        s11 += b * b;
        s01 += a * b;
    }
    if !(s00 > 0.0 && s11 > 0.0) {
        return Err(CalibrationError::Degenerate("mediator is constant over the transition set".into()));
    }
    // The common 1/(|C| - 1) factors cancel.
    Ok((s01 / (s00 * s11).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRho {
    pub period: usize,
    pub n_pairs: usize,
    /// Absent when fewer than [`MIN_PAIRS`] pairs transition at this period.
    pub rho_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate {
    pub rho_star: f64,
    pub n_pairs: usize,
    pub by_period: Option<Vec<PeriodRho>>,
}

/// Lower-bound estimate `ρ*` of the cross-world mediator correlation.
pub fn estimate_rho_star(data: &TrialDataset, per_period: bool) -> Result<RhoEstimate, CalibrationError> {
    estimate_rho_star_from(&observed_rows(data, true), per_period)
}

pub fn estimate_rho_star_from(view: &LaggedView, per_period: bool) -> Result<RhoEstimate, CalibrationError> {
    let pairs = transition_pairs(view);
    if pairs.len() < MIN_PAIRS {
        return Err(CalibrationError::InsufficientPairs { found: pairs.len(), period: None });
    }
    let rho_star = pair_correlation(&pairs)?;
    let by_period = per_period.then(|| {
        (2..=view.n_periods)
            .filter_map(|t| {
                let sub: Vec<TransitionPair> = pairs.iter().copied().filter(|p| p.period == t).collect();
                if sub.is_empty() {
                    return None;
                }
                let rho_star = if sub.len() >= MIN_PAIRS { pair_correlation(&sub).ok() } else { None };
                Some(PeriodRho { period: t, n_pairs: sub.len(), rho_star })
            })
            .collect()
    });
    Ok(RhoEstimate { rho_star, n_pairs: pairs.len(), by_period })
}

/// Coefficients `(ζ_0, ζ_1, ζ_2)` of `Y_ij,t-1 ~ 1 + M_ijt + M_ij,t-1` and
/// `(θ_0, θ_1, θ_2)` of `Y_ijt ~ 1 + M_ijt + M_ij,t-1`, both on the transition set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryFit {
    pub zeta: LogisticFit,
    pub theta: LogisticFit,
}

pub fn fit_auxiliary_glm(view: &LaggedView) -> Result<AuxiliaryFit, CalibrationError> {
    let pairs = transition_pairs(view);
    if pairs.len() < MIN_PAIRS {
        return Err(CalibrationError::InsufficientPairs { found: pairs.len(), period: None });
    }
    let x: Vec<Vec<f64>> = pairs.iter().map(|p| vec![1.0, p.mediator, p.mediator_prev]).collect();
    let y_prev: Vec<bool> = pairs.iter().map(|p| p.outcome_prev).collect();
    let y: Vec<bool> = pairs.iter().map(|p| p.outcome).collect();
    Ok(AuxiliaryFit { zeta: fit_logistic("zeta", &x, &y_prev)?, theta: fit_logistic("theta", &x, &y)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaBounds {
    pub lambda0_lower: f64,
    pub lambda0_upper: f64,
    pub lambda1_lower: f64,
    pub lambda1_upper: f64,
}

/// Assemble bounds from the auxiliary slopes and posterior means.
pub fn lambda_bounds_from(zeta1: f64, theta2: f64, beta2_mean: f64, beta23_mean: f64) -> LambdaBounds {
    LambdaBounds { lambda0_lower: zeta1, lambda0_upper: beta2_mean, lambda1_lower: theta2, lambda1_upper: beta23_mean }
}

pub fn lambda_bounds(aux: &AuxiliaryFit, draws: &PosteriorDraws) -> Result<LambdaBounds, CalibrationError> {
    if draws.is_empty() {
        return Err(CalibrationError::NoDraws);
    }
    Ok(lambda_bounds_from(
        aux.zeta.coefficients[1],
        aux.theta.coefficients[2],
        draws.posterior_mean(|p| p.beta2),
        draws.posterior_mean(|p| p.beta2 + p.beta3),
    ))
}

/// `{ρ*}` followed by the multiples of 0.1 above it, up to 0.9.
pub fn rho_grid(rho_star: f64) -> Vec<f64> {
    let mut grid = vec![rho_star];
    let first = (rho_star * 10.0 - 1e-9).ceil() as i64;
    for k in first..=9 {
        let r = k as f64 / 10.0;
        if r > rho_star + 1e-9 {
            grid.push(r);
        }
    }
    grid
}

/// How one arm's `λ` is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum LambdaRule {
    /// Triangular on `[lower, upper]` with its mode at `lower`; a point mass
    /// at the midpoint when `lower >= upper`.
    Triangular { lower: f64, upper: f64 },
    Fixed { value: f64 },
}

impl LambdaRule {
    /// True when a triangular rule collapses to its midpoint.
    pub fn is_fallback(&self) -> bool {
        matches!(self, Self::Triangular { lower, upper } if lower >= upper)
    }

    /// Draw one value, optionally with a draw-specific upper bound.
    pub fn draw<R: Rng + ?Sized>(&self, upper_override: Option<f64>, rng: &mut R) -> f64 {
        match *self {
            Self::Fixed { value } => value,
            Self::Triangular { lower, upper } => {
                let upper = upper_override.unwrap_or(upper);
                // Consume a uniform either way so arms stay aligned across settings.
                let u: f64 = rng.random();
                if lower >= upper {
                    0.5 * (lower + upper)
                } else {
                    upper - (upper - lower) * (1.0 - u).sqrt()
                }
            }
        }
    }
}

/// Sensitivity grid and `λ` rules used by the PCE engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub rho_grid: Vec<f64>,
    pub lambda0: LambdaRule,
    pub lambda1: LambdaRule,
    /// Take each posterior draw's `β_2` and `β_2 + β_3` as the triangular upper bounds.
    #[serde(default)]
    pub per_draw_upper: bool,
}

impl SensitivityConfig {
    pub fn from_bounds(rho_star: f64, b: &LambdaBounds) -> Self {
        Self {
            rho_grid: rho_grid(rho_star),
            lambda0: LambdaRule::Triangular { lower: b.lambda0_lower, upper: b.lambda0_upper },
            lambda1: LambdaRule::Triangular { lower: b.lambda1_lower, upper: b.lambda1_upper },
            per_draw_upper: false,
        }
    }

    pub fn check(&self) -> Result<(), CalibrationError> {
        if self.rho_grid.is_empty() {
            return Err(CalibrationError::Config("empty rho grid".into()));
        }
        if let Some(r) = self.rho_grid.iter().find(|r| !(r.abs() < 1.0)) {
            return Err(CalibrationError::Config(format!("rho grid value {r} outside (-1, 1)")));
        }
        for rule in [self.lambda0, self.lambda1] {
            let finite = match rule {
                LambdaRule::Triangular { lower, upper } => lower.is_finite() && upper.is_finite(),
                LambdaRule::Fixed { value } => value.is_finite(),
            };
            if !finite {
                return Err(CalibrationError::Config(format!("non-finite lambda rule {rule:?}")));
            }
        }
        Ok(())
    }

    /// `(λ_0, λ_1)` paired with posterior draw `draw`; `beta` carries that
    /// draw's `(β_2, β_2 + β_3)` when upper bounds are per draw.
    pub fn lambda_for_draw(&self, seed: u64, draw: usize, beta: Option<(f64, f64)>) -> (f64, f64) {
        let over = beta.filter(|_| self.per_draw_upper);
        let mut r0 = lambda_stream(seed, draw as u64, 0);
        let mut r1 = lambda_stream(seed, draw as u64, 1);
        (self.lambda0.draw(over.map(|b| b.0), &mut r0), self.lambda1.draw(over.map(|b| b.1), &mut r1))
    }
}

fn lambda_stream(seed: u64, index: u64, arm: u64) -> StreamRng {
    stream_rng(seed, &[STREAM_LAMBDA, index, arm])
}

/// `count` independent `(λ_0, λ_1)` pairs from triangular rules built on `bounds`.
pub fn sample_lambda(bounds: &LambdaBounds, count: usize, seed: u64) -> Vec<(f64, f64)> {
    let r0 = LambdaRule::Triangular { lower: bounds.lambda0_lower, upper: bounds.lambda0_upper };
    let r1 = LambdaRule::Triangular { lower: bounds.lambda1_lower, upper: bounds.lambda1_upper };
    let mut g0 = lambda_stream(seed, u64::MAX, 0);
    let mut g1 = lambda_stream(seed, u64::MAX, 1);
    (0..count).map(|_| (r0.draw(None, &mut g0), r1.draw(None, &mut g1))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub lower: f64,
    pub upper: f64,
    /// `"midpoint"` when the bounds are inverted and the point mass is used.
    pub fallback: Option<String>,
}

impl ArmReport {
    fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper, fallback: (lower >= upper).then(|| "midpoint".to_string()) }
    }
}

/// Everything the calibration step produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rho: RhoEstimate,
    pub rho_grid: Vec<f64>,
    pub auxiliary: AuxiliaryFit,
    pub lambda0: ArmReport,
    pub lambda1: ArmReport,
    pub sensitivity: SensitivityConfig,
}

/// Run the full calibration for a dataset and its posterior draws.
pub fn calibrate(data: &TrialDataset, draws: &PosteriorDraws, per_period: bool) -> Result<CalibrationReport, CalibrationError> {
    let view = observed_rows(data, true);
    let rho = estimate_rho_star_from(&view, per_period)?;
    if !(rho.rho_star.abs() < 1.0) {
        return Err(CalibrationError::Degenerate(format!("rho* = {} leaves no admissible grid", rho.rho_star)));
    }
    let auxiliary = fit_auxiliary_glm(&view)?;
    let bounds = lambda_bounds(&auxiliary, draws)?;
    let sensitivity = SensitivityConfig::from_bounds(rho.rho_star, &bounds);
    Ok(CalibrationReport {
        rho_grid: sensitivity.rho_grid.clone(),
        lambda0: ArmReport::new(bounds.lambda0_lower, bounds.lambda0_upper),
        lambda1: ArmReport::new(bounds.lambda1_lower, bounds.lambda1_upper),
        rho,
        auxiliary,
        sensitivity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LagValues, LaggedRow};
    use rand_distr::StandardNormal;

    fn view_from(pairs: &[(f64, f64, bool, bool)]) -> LaggedView {
        let rows = pairs
            .iter()
            .enumerate()
            .map(|(i, &(m0, m1, y0, y1))| LaggedRow {
                cluster: 0,
                individual: i,
                period: 2,
                treatment: true,
                prev_treatment: false,
                mediator: m1,
                outcome: y1,
                lag: Some(LagValues { treatment: false, mediator: m0, outcome: y0 }),
            })
            .collect();
        LaggedView { rows, n_clusters: 1, n_individuals: pairs.len(), n_periods: 2, warnings: vec![] }
    }

    #[test]
    fn identical_mediators_give_unit_rho() {
        let pairs: Vec<_> = (0..10).map(|i| (i as f64, i as f64, false, true)).collect();
        assert!((estimate_rho_star_from(&view_from(&pairs), false).unwrap().rho_star - 1.0).abs() < 1e-15);
    }

    #[test]
    fn independent_mediators_give_zero_rho() {
        let mut rng = stream_rng(1, &[]);
        let n = 10_000;
        let pairs: Vec<_> = (0..n).map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal), false, false)).collect();
        let r = estimate_rho_star_from(&view_from(&pairs), false).unwrap().rho_star;
        assert!(r.abs() < 4.0 / (n as f64).sqrt(), "{r}");
    }

    #[test]
    fn too_few_pairs_is_an_error() {
        let pairs = [(0.0, 1.0, false, false), (1.0, 0.0, true, true)];
        assert_eq!(
            estimate_rho_star_from(&view_from(&pairs), false).unwrap_err(),
            CalibrationError::InsufficientPairs { found: 2, period: None }
        );
    }

    #[test]
    fn rho_is_affine_invariant() {
        let mut rng = stream_rng(2, &[]);
        let base: Vec<(f64, f64, bool, bool)> = (0..200)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                (a, 0.5 * a + rng.sample::<f64, _>(StandardNormal), false, false)
            })
            .collect();
        let shifted: Vec<_> = base.iter().map(|&(a, b, y0, y1)| (a + 7.0, b + 7.0, y0, y1)).collect();
        let r = |p: &[(f64, f64, bool, bool)]| estimate_rho_star_from(&view_from(p), false).unwrap().rho_star;
        assert!((r(&base) - r(&shifted)).abs() < 1e-12);
    }

    #[test]
    fn grid_fixtures() {
        assert_eq!(rho_grid(0.654), vec![0.654, 0.7, 0.8, 0.9]);
        assert_eq!(rho_grid(0.9), vec![0.9]);
        assert_eq!(rho_grid(0.35), vec![0.35, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        assert_eq!(rho_grid(0.95), vec![0.95]);
        assert_eq!(rho_grid(0.3), vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
    }

    #[test]
    fn bounds_fixtures() {
        let b = lambda_bounds_from(0.048, -0.006, 0.254, 0.092);
        assert_eq!((b.lambda0_lower, b.lambda0_upper), (0.048, 0.254));
        assert_eq!((b.lambda1_lower, b.lambda1_upper), (-0.006, 0.092));
    }

    #[test]
    fn degenerate_and_inverted_supports() {
        let same = LambdaBounds { lambda0_lower: 0.1, lambda0_upper: 0.1, lambda1_lower: 0.3, lambda1_upper: 0.1 };
        for (a, b) in sample_lambda(&same, 100, 5) {
            assert_eq!(a, 0.1);
            assert!((b - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn triangular_mean_and_ks() {
        let b = LambdaBounds { lambda0_lower: 0.0, lambda0_upper: 1.0, lambda1_lower: -1.0, lambda1_upper: 0.0 };
        let n = 100_000;
        let draws = sample_lambda(&b, n, 7);
        let x: Vec<f64> = draws.iter().map(|d| d.0).collect();
        let mean = x.iter().sum::<f64>() / n as f64;
        // Var of triangular(0, 1, mode 0) is 1/18.
        assert!((mean - 1.0 / 3.0).abs() < 4.0 * (1.0 / 18.0 / n as f64).sqrt(), "{mean}");
        let mut s = x.clone();
        s.sort_by(f64::total_cmp);
        let ks = s
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = 1.0 - (1.0 - v).powi(2);
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.628 / (n as f64).sqrt(), "{ks}");
        assert!(draws.iter().all(|d| (0.0..=1.0).contains(&d.0) && (-1.0..=0.0).contains(&d.1)));
    }

    #[test]
    fn auxiliary_slopes_scale_inversely() {
        let mut rng = stream_rng(4, &[]);
        let pairs: Vec<(f64, f64, bool, bool)> = (0..500)
            .map(|_| {
                let m0: f64 = rng.sample(StandardNormal);
                let m1: f64 = 0.5 * m0 + rng.sample::<f64, _>(StandardNormal);
                let y0 = rng.random::<f64>() < crate::numerics::expit(0.3 * m1);
                let y1 = rng.random::<f64>() < crate::numerics::expit(-0.2 + 0.4 * m0 + 0.2 * m1);
                (m0, m1, y0, y1)
            })
            .collect();
        let scaled: Vec<_> = pairs.iter().map(|&(a, b, y0, y1)| (2.0 * a, 2.0 * b, y0, y1)).collect();
        let f = fit_auxiliary_glm(&view_from(&pairs)).unwrap();
        let g = fit_auxiliary_glm(&view_from(&scaled)).unwrap();
        assert!((f.zeta.coefficients[1] - 2.0 * g.zeta.coefficients[1]).abs() < 1e-8);
        assert!((f.theta.coefficients[1] - 2.0 * g.theta.coefficients[1]).abs() < 1e-8);
        assert!(f.zeta.max_score <= SCORE_TOLERANCE && f.theta.max_score <= SCORE_TOLERANCE);
    }

    #[test]
    fn per_draw_upper_overrides_bounds() {
        let cfg = SensitivityConfig {
            rho_grid: vec![0.5],
            lambda0: LambdaRule::Triangular { lower: 0.0, upper: 0.0 },
            lambda1: LambdaRule::Fixed { value: 0.4 },
            per_draw_upper: true,
        };
        let (l0, l1) = cfg.lambda_for_draw(1, 0, Some((0.5, 0.9)));
        assert!((0.0..=0.5).contains(&l0) && l0 > 0.0);
        assert_eq!(l1, 0.4);
        assert_eq!(cfg.lambda_for_draw(1, 0, Some((0.5, 0.9))), (l0, l1));
    }
}
