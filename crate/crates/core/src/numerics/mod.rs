//! Numerical kernel shared by the model, calibration and PCE engine.

pub mod interp;
pub mod newton;
pub mod quadrature;
pub mod rng;
pub mod special;
pub mod truncated;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use interp::MonotoneCubic;
pub use newton::{newton_solve, newton_solve_fdf, NewtonConfig};
pub use quadrature::{gauss_hermite_rule, ghq_expectation, GaussHermiteRule};
pub use rng::{derive_seed, stream_rng, StreamRng};
pub use special::{expit, expit_prime, logit, softplus, std_normal_cdf, std_normal_pdf, std_normal_quantile, std_normal_sf};
pub use truncated::{sample_strata_pair, StrataPairSampler, TruncatedNormal};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("quadrature order {0} outside 1..=128")]
    OrderOutOfRange(usize),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("Newton iteration did not converge after {iterations} iterations (last x = {last}, residual = {residual})")]
    NonConvergence { last: f64, residual: f64, iterations: usize },
    #[error("stratum probability {probability:e} is too small to sample")]
    DegenerateStratum { probability: f64 },
}

/// A real interval `[lo, hi]`; either end may be infinite.
///
/// Boundary membership is irrelevant for the continuous laws used here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    #[serde(with = "extended_float")]
    pub lo: f64,
    #[serde(with = "extended_float")]
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self, NumericsError> {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(NumericsError::Domain(format!("interval needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// The whole real line.
    pub fn full() -> Self {
        Self { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", extended_float::render(self.lo), extended_float::render(self.hi))
    }
}

/// Serialize `±inf` as the strings `"-inf"` / `"inf"` so intervals survive JSON.
pub mod extended_float {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn render(x: f64) -> String {
        if x == f64::INFINITY {
            "inf".into()
        } else if x == f64::NEG_INFINITY {
            "-inf".into()
        } else {
            format!("{x}")
        }
    }

    pub fn parse(s: &str) -> Option<f64> {
        match s.trim() {
            "inf" | "+inf" | "Inf" | "infinity" => Some(f64::INFINITY),
            "-inf" | "-Inf" | "-infinity" => Some(f64::NEG_INFINITY),
            other => other.parse().ok(),
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&render(*x))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(x),
            Raw::Str(s) => parse(&s).ok_or_else(|| de::Error::custom(format!("not a number: {s}"))),
        }
    }
}
