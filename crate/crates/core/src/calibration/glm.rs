//! Maximum-likelihood logistic regression by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::CalibrationError;
use crate::numerics::expit;

const MAX_ITERATIONS: usize = 100;
/// Stop when every score component is at most this large.
pub const SCORE_TOLERANCE: f64 = 1e-8;
/// A coefficient vector this long signals perfect separation.
const SEPARATION_NORM: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub iterations: usize,
    pub n: usize,
    /// Largest absolute score component at the solution.
    pub max_score: f64,
}

/// Fit `logit P(y = 1) = x'β`. Each row of `x` must include any intercept.
pub fn fit_logistic(model: &'static str, x: &[Vec<f64>], y: &[bool]) -> Result<LogisticFit, CalibrationError> {
    let n = x.len();
    let k = x.first().map_or(0, Vec::len);
    if n != y.len() || x.iter().any(|r| r.len() != k) {
        return Err(CalibrationError::Degenerate(format!("{model}: ragged design")));
    }
    if n <= k || k == 0 {
        return Err(CalibrationError::Rank { model, rank: 0, columns: k });
    }
    let xm = DMatrix::from_fn(n, k, |i, j| x[i][j]);
    let yv = DVector::from_fn(n, |i, _| f64::from(u8::from(y[i])));

    let svd = xm.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > smax * 1e-10).count();
    if rank < k {
        return Err(CalibrationError::Rank { model, rank, columns: k });
    }

    let mut beta = DVector::zeros(k);
    for it in 0..MAX_ITERATIONS {
        let p = (&xm * &beta).map(expit);
        let score = xm.transpose() * (&yv - &p);
        let max_score = score.amax();
        if max_score <= SCORE_TOLERANCE {
            let info = weighted_gram(&xm, &p);
            let cov = info.try_inverse().ok_or(CalibrationError::Rank { model, rank, columns: k })?;
            return Ok(LogisticFit {
                coefficients: beta.iter().copied().collect(),
                std_errors: (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect(),
                iterations: it,
                n,
                max_score,
            });
        }
        let info = weighted_gram(&xm, &p);
        let step = info
            .cholesky()
            .map(|c| c.solve(&score))
            .ok_or(CalibrationError::Separation { model, iterations: it })?;
        beta += step;
        if !beta.iter().all(|b| b.is_finite()) || beta.norm() > SEPARATION_NORM {
            return Err(CalibrationError::Separation { model, iterations: it + 1 });
        }
    }
    Err(CalibrationError::NonConvergence { model, iterations: MAX_ITERATIONS })
}

fn weighted_gram(x: &DMatrix<f64>, p: &DVector<f64>) -> DMatrix<f64> {
    let w = p.map(|pi| pi * (1.0 - pi));
    let mut xw = x.clone();
    for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    x.transpose() * xw
}
