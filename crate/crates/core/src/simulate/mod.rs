//! Synthetic stepped-wedge trials drawn from the observed-data model, with
//! monotone dropout and a brute-force PCE oracle for known truths.

mod oracle;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ObservationRecord, TrialDataset};
use crate::model::{Link, ModelError, ModelParams, RandomEffectCov};
use crate::numerics::{derive_seed, expit, logit, stream_rng, NumericsError};

pub use oracle::{true_pce_oracle, OracleEstimate, OracleResolution, PceOracle};

const STREAM_TRIAL: u64 = 0x5349_4d;
const STREAM_DROPOUT: u64 = 0x4452_4f50;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid design: {0}")]
    Design(String),
    #[error(transparent)]
    Params(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Monotone dropout process.
///
/// From period 2 on, an individual still in the study drops out at period t
/// with probability `expit(logit(hazard) + mediator_slope·M_{t-1} +
/// outcome_slope·Y_{t-1})`. The dependence is on observed history only.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutSpec {
    pub hazard: f64,
    pub mediator_slope: f64,
    pub outcome_slope: f64,
}

impl DropoutSpec {
    pub fn constant(hazard: f64) -> Self {
        Self { hazard, ..Self::default() }
    }

    fn check(&self) -> Result<(), SimulateError> {
        if !(0.0..1.0).contains(&self.hazard) {
            return Err(SimulateError::Design(format!("dropout hazard must lie in [0, 1), got {}", self.hazard)));
        }
        if !(self.mediator_slope.is_finite() && self.outcome_slope.is_finite()) {
            return Err(SimulateError::Design("dropout slopes must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignSpec {
    pub n_clusters: usize,
    pub n_periods: usize,
    pub cohort_size: usize,
    /// First treated period per cluster; defaults to [`staircase`].
    pub rollout: Option<Vec<usize>>,
    pub dropout: DropoutSpec,
}

impl Default for DesignSpec {
    fn default() -> Self {
        Self { n_clusters: 8, n_periods: 5, cohort_size: 30, rollout: None, dropout: DropoutSpec::default() }
    }
}

/// Standard staircase: cluster j (0-based) starts treatment at
/// `2 + ⌊j (T-1) / J⌋`, so the clusters cross over in equal groups.
pub fn staircase(n_clusters: usize, n_periods: usize) -> Vec<usize> {
    (0..n_clusters).map(|j| 2 + j * (n_periods - 1) / n_clusters).collect()
}

impl DesignSpec {
    pub fn starts(&self) -> Vec<usize> {
        self.rollout.clone().unwrap_or_else(|| staircase(self.n_clusters, self.n_periods))
    }

    pub fn check(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::Design(m));
        if self.n_clusters < 1 || self.cohort_size < 1 {
            return bad("need at least one cluster and one individual per cluster".into());
        }
        if self.n_periods < 2 {
            return bad(format!("need at least two periods, got {}", self.n_periods));
        }
        let starts = self.starts();
        if starts.len() != self.n_clusters {
            return bad(format!("rollout lists {} clusters, design has {}", starts.len(), self.n_clusters));
        }
        if let Some(&s) = starts.iter().find(|&&s| s < 2 || s > self.n_periods) {
            return bad(format!("start period {s} outside 2..={}", self.n_periods));
        }
        self.dropout.check()
    }
}

/// Ground truth for simulation and the PCE oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthParams {
    /// Must carry `η_2t` for every period: outcomes are generated alongside
    /// each mediator value.
    pub params: ModelParams,
    #[serde(default)]
    pub mediator_lag: u8,
    /// Cross-world mediator correlation.
    pub rho: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    #[serde(default)]
    pub link: Link,
}

impl TruthParams {
    /// A moderate-regime truth over `n_periods` periods.
    pub fn example(n_periods: usize) -> Self {
        Self {
            params: ModelParams {
                eta1: (0..n_periods).map(|t| 0.1 * t as f64).collect(),
                eta2: (0..n_periods).map(|t| -0.4 + 0.05 * t as f64).collect(),
                outcome_periods: (1..=n_periods).collect(),
                gamma1: 0.8,
                beta1: 0.3,
                beta2: 0.4,
                beta3: 0.3,
                beta4: 0.0,
                sigma_eps: 0.8,
                alpha: RandomEffectCov::new(0.4, 0.3, 0.3),
                phi: RandomEffectCov::new(0.6, 0.4, 0.2),
            },
            mediator_lag: 0,
            rho: 0.5,
            lambda0: 0.2,
            lambda1: 0.2,
            link: Link::Logit,
        }
    }

    /// Correlation of the mediator across worlds implied by shared random
    /// effects with independent residuals: `(Σα11 + Σφ11) / v`.
    pub fn implied_rho(&self) -> f64 {
        let p = &self.params;
        (p.alpha.var1() + p.phi.var1()) / p.mediator_variance()
    }

    pub fn check(&self) -> Result<(), SimulateError> {
        self.params.check()?;
        let t = self.params.n_periods();
        if self.params.outcome_periods != (1..=t).collect::<Vec<_>>() {
            return Err(SimulateError::Design("truth must define eta2 for every period 1..=T".into()));
        }
        if self.mediator_lag > 1 {
            return Err(SimulateError::Design("mediator_lag must be 0 or 1".into()));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(SimulateError::Design(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        if !(self.lambda0.is_finite() && self.lambda1.is_finite()) {
            return Err(SimulateError::Design("lambdas must be finite".into()));
        }
        Ok(())
    }
}

/// Simulate a complete trial and then apply the design's dropout process.
pub fn simulate_trial(design: &DesignSpec, truth: &TruthParams, seed: u64) -> Result<TrialDataset, SimulateError> {
    design.check()?;
    truth.check()?;
    if truth.params.n_periods() != design.n_periods {
        return Err(SimulateError::Design(format!(
            "truth has {} periods, design has {}",
            truth.params.n_periods(),
            design.n_periods
        )));
    }
    let p = &truth.params;
    let mut rng = stream_rng(seed, &[STREAM_TRIAL]);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let mut uniform = {
        let mut urng = stream_rng(seed, &[STREAM_TRIAL, 1]);
        move || -> f64 { urng.random() }
    };
    let starts = design.starts();
    let t_max = design.n_periods;
    let mut records = Vec::with_capacity(design.n_clusters * design.cohort_size * t_max);
    for (j, &start) in starts.iter().enumerate() {
        let (a1, a2) = p.alpha.apply(normal(), normal());
        for i in 0..design.cohort_size {
            let (f1, f2) = p.phi.apply(normal(), normal());
            let mut prev_m = None;
            for t in 1..=t_max {
                let z = t >= start;
                let zp = t > start;
                let (zf, zpf) = (f64::from(u8::from(z)), f64::from(u8::from(zp)));
                let m = p.eta1[t - 1] + p.gamma1 * zf + a1 + f1 + p.sigma_eps * normal();
                let mstar = if truth.mediator_lag == 0 { m } else { prev_m.unwrap_or(0.0) };
                let lp = p.eta2[t - 1] + p.beta1 * zf + p.beta2 * mstar + p.beta3 * zf * mstar + p.beta4 * zpf * mstar + a2 + f2;
                let y = uniform() < expit(lp);
                records.push(ObservationRecord {
                    cluster_id: format!("c{:02}", j + 1),
                    individual_id: format!("i{:03}", i + 1),
                    period: t,
                    treatment: z,
                    mediator: Some(m),
                    outcome: Some(y),
                });
                prev_m = Some(m);
            }
        }
    }
    let complete = TrialDataset::from_records(records).map_err(|e| SimulateError::Design(e.to_string()))?;
    apply_mar_dropout(&complete, &design.dropout, derive_seed(seed, &[STREAM_DROPOUT]))
}

/// Constant-hazard monotone dropout.
pub fn apply_dropout(data: &TrialDataset, hazard: f64, seed: u64) -> Result<TrialDataset, SimulateError> {
    apply_mar_dropout(data, &DropoutSpec::constant(hazard), seed)
}

/// Monotone dropout whose hazard may depend on the last observed `(M, Y)`.
///
/// Records are kept; the dropped cells become missing. Individuals who have
/// already dropped out stay out.
pub fn apply_mar_dropout(data: &TrialDataset, spec: &DropoutSpec, seed: u64) -> Result<TrialDataset, SimulateError> {
    spec.check()?;
    if spec.hazard == 0.0 {
        return Ok(data.clone());
    }
    let base = logit(spec.hazard)?;
    let t_max = data.n_periods();
    // Per-individual (M, Y) history and record positions by period.
    let mut slots: Vec<Vec<Option<usize>>> = vec![vec![None; t_max]; data.n_individuals()];
    for k in 0..data.records().len() {
        let (_, i) = data.record_index(k);
        slots[i][data.records()[k].period - 1] = Some(k);
    }
    let mut records = data.records().to_vec();
    for (i, periods) in slots.iter().enumerate() {
        let mut rng = stream_rng(seed, &[i as u64]);
        let mut dropped = false;
        for t in 2..=t_max {
            let Some(k) = periods[t - 1] else { continue };
            if !dropped {
                let last = periods[t - 2].map(|kp| &records[kp]);
                let (m_last, y_last) = match last {
                    Some(r) if r.is_observed() => (r.mediator.unwrap_or(0.0), f64::from(u8::from(r.outcome.unwrap_or(false)))),
                    // Already missing: the individual left earlier.
                    _ => {
                        dropped = true;
                        (0.0, 0.0)
                    }
                };
                let h = expit(base + spec.mediator_slope * m_last + spec.outcome_slope * y_last);
                let u: f64 = rng.random();
                if u < h {
                    dropped = true;
                }
            }
            if dropped {
                records[k].mediator = None;
                records[k].outcome = None;
            }
        }
    }
    TrialDataset::from_records(records).map_err(|e| SimulateError::Design(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate;

    #[test]
    fn staircase_pairs_clusters() {
        assert_eq!(staircase(8, 5), vec![2, 2, 3, 3, 4, 4, 5, 5]);
        assert_eq!(staircase(3, 4), vec![2, 3, 4]);
    }

    #[test]
    fn noiseless_mediator_is_deterministic() {
        let mut truth = TruthParams::example(4);
        truth.params.alpha = RandomEffectCov::zero();
        truth.params.phi = RandomEffectCov::zero();
        truth.params.sigma_eps = 0.0;
        let design = DesignSpec { n_clusters: 3, n_periods: 4, cohort_size: 4, ..Default::default() };
        let ds = simulate_trial(&design, &truth, 1).unwrap();
        for r in ds.records() {
            let want = truth.params.eta1[r.period - 1] + if r.treatment { truth.params.gamma1 } else { 0.0 };
            assert_eq!(r.mediator, Some(want));
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let design = DesignSpec { n_clusters: 4, n_periods: 4, cohort_size: 5, dropout: DropoutSpec::constant(0.1), ..Default::default() };
        let truth = TruthParams::example(4);
        let a = simulate_trial(&design, &truth, 42).unwrap();
        let b = simulate_trial(&design, &truth, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_trial(&design, &truth, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn output_passes_validation() {
        for seed in 0..5 {
            let design = DesignSpec {
                n_clusters: 5,
                n_periods: 5,
                cohort_size: 6,
                dropout: DropoutSpec { hazard: 0.2, mediator_slope: 0.5, outcome_slope: -0.3 },
                ..Default::default()
            };
            let ds = simulate_trial(&design, &TruthParams::example(5), seed).unwrap();
            let rep = validate(&ds);
            assert!(rep.is_valid(), "{rep}");
        }
    }

    #[test]
    fn control_mediator_mean_matches_eta() {
        // J=500, n=50 at t=1 (all control): mean of M ≈ η_11 within 3 SE.
        let truth = TruthParams::example(2);
        let design = DesignSpec { n_clusters: 500, n_periods: 2, cohort_size: 50, ..Default::default() };
        let ds = simulate_trial(&design, &truth, 7).unwrap();
        let m: Vec<f64> = ds.records().iter().filter(|r| r.period == 1).map(|r| r.mediator.unwrap()).collect();
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        let p = &truth.params;
        // Cluster effects dominate the variance of the grand mean.
        let se = ((p.alpha.var1() + (p.phi.var1() + p.sigma_eps.powi(2)) / 50.0) / 500.0).sqrt();
        assert!((mean - p.eta1[0]).abs() < 3.0 * se, "{mean} vs {} (se {se})", p.eta1[0]);
    }

    #[test]
    fn null_gamma_gives_exchangeable_arms() {
        // Two-sample KS between treated and control mediators in one period.
        let mut truth = TruthParams::example(3);
        truth.params.gamma1 = 0.0;
        truth.params.eta1 = vec![0.0; 3];
        truth.params.alpha = RandomEffectCov::zero();
        let design = DesignSpec { n_clusters: 400, n_periods: 3, cohort_size: 50, rollout: Some([2, 3].repeat(200)), ..Default::default() };
        let ds = simulate_trial(&design, &truth, 3).unwrap();
        let mut a: Vec<f64> = Vec::new();
        let mut b: Vec<f64> = Vec::new();
        for r in ds.records().iter().filter(|r| r.period == 2) {
            if r.treatment { a.push(r.mediator.unwrap()) } else { b.push(r.mediator.unwrap()) }
        }
        a.truncate(10_000);
        b.truncate(10_000);
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] { i += 1 } else { j += 1 }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        let n = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
        assert!(d < 1.63 / n.sqrt(), "KS {d}");
    }

    #[test]
    fn zero_hazard_is_identity() {
        let design = DesignSpec { n_clusters: 2, n_periods: 3, cohort_size: 3, ..Default::default() };
        let ds = simulate_trial(&design, &TruthParams::example(3), 1).unwrap();
        assert_eq!(apply_dropout(&ds, 0.0, 9).unwrap(), ds);
    }

    #[test]
    fn near_certain_dropout_leaves_only_baseline() {
        let design = DesignSpec { n_clusters: 4, n_periods: 5, cohort_size: 50, ..Default::default() };
        let ds = simulate_trial(&design, &TruthParams::example(5), 1).unwrap();
        let out = apply_dropout(&ds, 0.99, 2).unwrap();
        let later = out.records().iter().filter(|r| r.period >= 2 && r.is_observed()).count();
        assert!(later < 10, "{later}");
        assert!(out.records().iter().filter(|r| r.period == 1).all(|r| r.is_observed()));
        assert!(validate(&out).is_valid());
    }

    #[test]
    fn per_period_dropout_fraction_matches_hazard() {
        let h = 0.15;
        let design = DesignSpec { n_clusters: 100, n_periods: 3, cohort_size: 100, ..Default::default() };
        let ds = simulate_trial(&design, &TruthParams::example(3), 5).unwrap();
        let out = apply_dropout(&ds, h, 6).unwrap();
        let n = out.records().iter().filter(|r| r.period == 1).count() as f64;
        let gone = out.records().iter().filter(|r| r.period == 2 && !r.is_observed()).count() as f64;
        let se = (h * (1.0 - h) / n).sqrt();
        assert!((gone / n - h).abs() < 3.0 * se, "{} vs {h}", gone / n);
    }

    #[test]
    fn bad_design_is_rejected() {
        let design = DesignSpec { rollout: Some(vec![1, 2]), n_clusters: 2, ..Default::default() };
        assert!(design.check().is_err());
        let design = DesignSpec { dropout: DropoutSpec::constant(1.0), ..Default::default() };
        assert!(design.check().is_err());
        let mut truth = TruthParams::example(5);
        truth.params.outcome_periods = vec![2, 3, 4, 5];
        truth.params.eta2.pop();
        assert!(truth.check().is_err());
        let mut truth = TruthParams::example(5);
        truth.params.phi.corr = 1.5;
        assert!(simulate_trial(&DesignSpec::default(), &truth, 1).is_err());
    }
}
