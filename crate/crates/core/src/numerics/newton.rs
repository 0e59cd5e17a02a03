//! Damped Newton-Raphson for scalar roots.

use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Stop once `|f(x)| <= tolerance`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Number of step halvings allowed when a full step does not reduce
    /// `|f|`. Zero disables damping.
    pub max_halvings: u32,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iterations: 100, max_halvings: 30 }
    }
}

impl NewtonConfig {
    pub fn undamped() -> Self {
        Self { max_halvings: 0, ..Self::default() }
    }

    fn check(&self) -> Result<(), NumericsError> {
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(NumericsError::Domain(format!("invalid Newton configuration {self:?}")));
        }
        Ok(())
    }
}

/// Solve `f(x) = 0` from `x0` with separate value and derivative closures.
pub fn newton_solve<F, D>(mut f: F, mut df: D, x0: f64, cfg: &NewtonConfig) -> Result<f64, NumericsError>
where
    F: FnMut(f64) -> f64,
    D: FnMut(f64) -> f64,
{
    newton_solve_fdf(|x| (f(x), df(x)), x0, cfg)
}

/// Solve `f(x) = 0` where one closure returns `(f(x), f'(x))`.
pub fn newton_solve_fdf<G>(mut fdf: G, x0: f64, cfg: &NewtonConfig) -> Result<f64, NumericsError>
where
    G: FnMut(f64) -> (f64, f64),
{
    cfg.check()?;
    let mut x = x0;
    let (mut fx, mut dx) = fdf(x);
    let fail = |x: f64, fx: f64, iterations: usize| NumericsError::NonConvergence {
        last: x,
        residual: fx,
        iterations,
    };
    for it in 0..cfg.max_iterations {
        if !fx.is_finite() {
            return Err(fail(x, fx, it));
        }
        if fx.abs() <= cfg.tolerance {
            return Ok(x);
        }
        if !(dx.is_finite() && dx != 0.0) {
            return Err(fail(x, fx, it));
        }
        let step = fx / dx;
        let mut t = 1.0;
        let mut candidate = x - step;
        let (mut fc, mut dc) = fdf(candidate);
        let mut halvings = 0;
        while halvings < cfg.max_halvings && !(fc.is_finite() && fc.abs() < fx.abs()) {
            t *= 0.5;
            candidate = x - t * step;
            (fc, dc) = fdf(candidate);
            halvings += 1;
        }
        if cfg.max_halvings > 0 && !(fc.is_finite() && fc.abs() < fx.abs()) {
            return Err(fail(x, fx, it + 1));
        }
        x = candidate;
        fx = fc;
        dx = dc;
    }
    if fx.is_finite() && fx.abs() <= cfg.tolerance {
        Ok(x)
    } else {
        Err(fail(x, fx, cfg.max_iterations))
    }
}
