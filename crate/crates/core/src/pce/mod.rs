//! Principal causal effects over strata of the mediator shift `M(1̲_t) - M(0̲_t)`.
//!
//! For stratum `I`, the PCE at period `t` is
//!
//! ```text
//! E[ g⁻¹(Δ(M(1), 1) + λ_1 M(0)) - g⁻¹(Δ(M(0), 0) + λ_0 M(1)) | M(1) - M(0) ∈ I ]
//! ```
//!
//! where `(M(0), M(1))` is bivariate normal with cross-world correlation `ρ`
//! and `Δ(m, z)` solves the convolution equation that ties the shift model to
//! the observed conditional mean `E(Y | M = m, z̲_t)`.

mod engine;
mod identify;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationError;
use crate::numerics::{Interval, NumericsError};

pub use engine::{
    default_deltas, default_intervals, pce_delta_sweep, pce_for_draw, pce_posterior, quantile, CellFailure, PceEstimate, PceQuery, PceRecord,
    PceSummary, PceValue, DELTA_GRID_HALF_WIDTH, DELTA_GRID_POINTS, MAX_FAILURE_RATE, MIN_STRATUM_PROBABILITY,
};
pub use identify::{
    conditional_outcome_mean, joint_mediator_law, solve_delta, strata_probability, Convolution, DeltaProblem, DeltaSolution, JointMediatorLaw,
    OutcomeKernel,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PceError {
    #[error("period {period}: {detail}")]
    Period { period: usize, detail: String },
    #[error("cross-world correlation must lie in (-1, 1), got {0}")]
    Rho(f64),
    #[error("degenerate law: {0}")]
    Degenerate(String),
    #[error("outcome random-effect covariance inconsistent: conditional variance {0:e}")]
    Covariance(f64),
    #[error("stratum probability {probability:e} is below the estimable minimum")]
    DegenerateStratum { probability: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("{failed} of {total} cells failed (first: {first})")]
    TooManyFailures { failed: usize, total: usize, first: String },
    #[error("invalid query: {0}")]
    Config(String),
    #[error("write: {0}")]
    Io(String),
}

pub const PCE_CSV_HEADER: [&str; 9] = ["period", "interval", "rho", "draw", "lambda0", "lambda1", "numerator", "denominator", "pce"];

fn io_err(e: impl std::fmt::Display) -> PceError {
    PceError::Io(e.to_string())
}

/// Long-format per-draw values; with `delta`, a leading cutoff column is added.
pub fn write_pce_csv<W: Write>(writer: W, rows: &[(Option<f64>, &PceEstimate)]) -> Result<(), PceError> {
    let mut w = csv::Writer::from_writer(writer);
    let with_delta = rows.iter().any(|(d, _)| d.is_some());
    let mut header: Vec<&str> = Vec::new();
    if with_delta {
        header.push("delta");
    }
    header.extend(PCE_CSV_HEADER);
    w.write_record(&header).map_err(io_err)?;
    for (delta, est) in rows {
        for r in &est.records {
            let mut rec = Vec::with_capacity(10);
            if let Some(d) = delta {
                rec.push(d.to_string());
            }
            rec.extend([
                r.period.to_string(),
                PceQuery::label(r.interval),
                r.rho.to_string(),
                r.draw.to_string(),
                r.lambda0.to_string(),
                r.lambda1.to_string(),
                r.value.numerator.to_string(),
                r.value.denominator.to_string(),
                r.value.pce.to_string(),
            ]);
            w.write_record(&rec).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub x: f64,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub interval: String,
    pub rho: f64,
    /// Set for cutoff sweeps, where each series fixes one period.
    pub period: Option<usize>,
    pub points: Vec<PlotPoint>,
}

/// Credible bands laid out for external plotting: x is the period or the cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x_axis: String,
    pub series: Vec<PlotSeries>,
}

impl PlotData {
    /// One series per (interval, ρ) with the period on the x axis.
    pub fn by_period(est: &PceEstimate) -> Self {
        let mut series: Vec<PlotSeries> = Vec::new();
        for s in &est.summaries {
            let point = PlotPoint { x: s.period as f64, mean: s.mean, q025: s.q025, q975: s.q975 };
            match series.iter_mut().find(|x| x.interval == s.interval && x.rho == s.rho) {
                Some(x) => x.points.push(point),
                None => series.push(PlotSeries { interval: s.interval.clone(), rho: s.rho, period: None, points: vec![point] }),
            }
        }
        Self { x_axis: "period".into(), series }
    }

    /// One series per (period, interval, ρ) with the cutoff on the x axis.
    pub fn by_delta(sweep: &[(f64, PceEstimate)]) -> Self {
        let mut series: Vec<PlotSeries> = Vec::new();
        for (delta, est) in sweep {
            for s in &est.summaries {
                let point = PlotPoint { x: *delta, mean: s.mean, q025: s.q025, q975: s.q975 };
                match series.iter_mut().find(|x| x.interval == s.interval && x.rho == s.rho && x.period == Some(s.period)) {
                    Some(x) => x.points.push(point),
                    None => series.push(PlotSeries { interval: s.interval.clone(), rho: s.rho, period: Some(s.period), points: vec![point] }),
                }
            }
        }
        Self { x_axis: "delta".into(), series }
    }
}

/// Summary rows of a run, with the cutoff when part of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub delta: Option<f64>,
    #[serde(flatten)]
    pub summary: PceSummary,
}

pub fn summary_rows(rows: &[(Option<f64>, &PceEstimate)]) -> Vec<SummaryRow> {
    rows.iter().flat_map(|(d, e)| e.summaries.iter().map(move |s| SummaryRow { delta: *d, summary: s.clone() })).collect()
}

/// Human-readable interval label with its bounds, e.g. `I1 [-0.5, 0.5]`.
pub fn describe_interval(k: usize, iv: &Interval) -> String {
    format!("{} {iv}", PceQuery::label(k))
}
