//! Gauss-Hermite quadrature.
//!
//! Nodes and weights follow the physicists' convention (weight function
//! `e^{-x²}`). They are seeded by the Golub-Welsch eigenvalue method on the
//! symmetric tridiagonal Jacobi matrix, polished by Newton iterations on the
//! orthonormal Hermite recurrence, and weighted with the Christoffel formula
//! `w = 1 / (n p̃_{n-1}(x)²)`, which stays positive and accurate even for the
//! outermost nodes of high-order rules.

use std::sync::OnceLock;

use nalgebra::DMatrix;

use super::NumericsError;

/// Order used for every conditional expectation in the PCE engine.
pub const DEFAULT_ORDER: usize = 20;
/// Largest supported rule.
pub const MAX_ORDER: usize = 128;

const SQRT_PI: f64 = 1.772_453_850_905_516;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermiteRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    normalized: Vec<f64>,
}

/// Orthonormal Hermite values `(p̃_{n-1}(x), p̃_n(x))`.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = SQRT_PI.sqrt().recip();
    for k in 0..n {
        let kf = k as f64;
        let next = x * (2.0 / (kf + 1.0)).sqrt() * cur - (kf / (kf + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    (prev, cur)
}

impl GaussHermiteRule {
    /// Build the `n`-point rule, `1 ≤ n ≤ 128`.
    pub fn new(n: usize) -> Result<Self, NumericsError> {
        if !(1..=MAX_ORDER).contains(&n) {
            return Err(NumericsError::OrderOutOfRange(n));
        }
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64 / 2.0).sqrt();
            jacobi[(k, k - 1)] = b;
            jacobi[(k - 1, k)] = b;
        }
        let mut nodes: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
        nodes.sort_by(f64::total_cmp);

        let nf = n as f64;
        for x in nodes.iter_mut() {
            for _ in 0..8 {
                let (pm1, pn) = orthonormal_hermite(n, *x);
                let dpn = (2.0 * nf).sqrt() * pm1;
                let step = pn / dpn;
                *x -= step;
                if step.abs() <= 1e-15 * x.abs().max(1.0) {
                    break;
                }
            }
        }
        // Enforce exact symmetry about zero.
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let r = 0.5 * (nodes[j] - nodes[i]);
            nodes[i] = -r;
            nodes[j] = r;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        let mut weights: Vec<f64> = nodes
            .iter()
            .map(|&x| {
                let (pm1, _) = orthonormal_hermite(n, x);
                1.0 / (nf * pm1 * pm1)
            })
            .collect();
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let w = 0.5 * (weights[i] + weights[j]);
            weights[i] = w;
            weights[j] = w;
        }
        let total: f64 = weights.iter().sum();
        let normalized = weights.iter().map(|w| w / total).collect();
        Ok(Self { nodes, weights, normalized })
    }

    /// Shared 20-point rule.
    pub fn default_rule() -> &'static GaussHermiteRule {
        static RULE: OnceLock<GaussHermiteRule> = OnceLock::new();
        RULE.get_or_init(|| GaussHermiteRule::new(DEFAULT_ORDER).expect("valid order"))
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Raw weights; they sum to `√π`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weights rescaled to sum to one, for expectations under a normal law.
    pub fn normalized_weights(&self) -> &[f64] {
        &self.normalized
    }

    /// `E f(X)` for `X ~ N(mean, var)`. With `var == 0` this is `f(mean)`.
    #[inline]
    pub fn expect<F: FnMut(f64) -> f64>(&self, mean: f64, var: f64, mut f: F) -> f64 {
        if var == 0.0 {
            return f(mean);
        }
        let scale = (2.0 * var).sqrt();
        self.nodes
            .iter()
            .zip(&self.normalized)
            .map(|(&s, &w)| w * f(mean + scale * s))
            .sum()
    }
}

/// Build an `n`-point rule.
pub fn gauss_hermite_rule(n: usize) -> Result<GaussHermiteRule, NumericsError> {
    GaussHermiteRule::new(n)
}

/// `E f(X)` for `X ~ N(mean, var)`, failing if `f` is not finite at a node.
pub fn ghq_expectation<F: FnMut(f64) -> f64>(
    rule: &GaussHermiteRule,
    mean: f64,
    var: f64,
    mut f: F,
) -> Result<f64, NumericsError> {
    if !(var >= 0.0) || !mean.is_finite() {
        return Err(NumericsError::Domain(format!(
            "normal law needs finite mean and var >= 0, got mean={mean}, var={var}"
        )));
    }
    let mut bad = None;
    let value = rule.expect(mean, var, |x| {
        let y = f(x);
        if !y.is_finite() && bad.is_none() {
            bad = Some(x);
        }
        y
    });
    match bad {
        Some(x) => Err(NumericsError::NonFinite(format!("integrand not finite at node {x}"))),
        None => Ok(value),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::special::expit;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_point_rule_is_analytic() {
        let rule = GaussHermiteRule::new(2).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(rule.nodes()[0], -r, epsilon = 1e-15);
        assert_abs_diff_eq!(rule.nodes()[1], r, epsilon = 1e-15);
        for w in rule.weights() {
            assert_abs_diff_eq!(*w, SQRT_PI / 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn weights_sum_to_sqrt_pi() {
        for n in [1, 2, 3, 7, 20, 40, 64, 100, 128] {
            let rule = GaussHermiteRule::new(n).unwrap();
            let s: f64 = rule.weights().iter().sum();
            assert!((s - SQRT_PI).abs() < 1e-12, "n={n}: {s}");
            assert!(rule.weights().iter().all(|&w| w > 0.0));
            for i in 0..n {
                assert_eq!(rule.nodes()[i], -rule.nodes()[n - 1 - i]);
            }
        }
    }

    #[test]
    fn order_out_of_range() {
        assert!(GaussHermiteRule::new(0).is_err());
        assert!(GaussHermiteRule::new(129).is_err());
    }

    #[test]
    fn second_moment_of_standard_normal() {
        let rule = GaussHermiteRule::new(20).unwrap();
        assert_abs_diff_eq!(rule.expect(0.0, 1.0, |x| x * x), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn polynomials_up_to_degree_2n_minus_1_are_exact() {
        // E X^k for X ~ N(0, 1): (k-1)!! for even k, 0 for odd k.
        let n = 10;
        let rule = GaussHermiteRule::new(n).unwrap();
        for k in 0..(2 * n) {
            let got = rule.expect(0.0, 1.0, |x| x.powi(k as i32));
            let want = if k % 2 == 1 { 0.0 } else { (1..k).step_by(2).map(|j| j as f64).product() };
            // Odd moments cancel to zero from terms of size E|X|^k.
            let scale: f64 = (1..k + 1).step_by(2).map(|j| j as f64).product();
            assert!((got - want).abs() <= 1e-12 * scale.max(1.0), "k={k}: {got} vs {want}");
        }
    }

    #[test]
    fn zero_variance_returns_point_value() {
        let rule = GaussHermiteRule::default_rule();
        assert_eq!(ghq_expectation(rule, 0.0, 0.0, expit).unwrap(), 0.5);
        assert_eq!(ghq_expectation(rule, 1.3, 0.0, |x| x * 2.0).unwrap(), 2.6);
    }

    #[test]
    fn expit_symmetry() {
        let rule = GaussHermiteRule::default_rule();
        assert_abs_diff_eq!(ghq_expectation(rule, 0.0, 1.0, expit).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn expit_matches_fine_grid_trapezoid() {
        // Independent oracle: trapezoid rule on ±12 sd with 20 001 points.
        let (mean, var): (f64, f64) = (0.3, 0.8);
        let sd = var.sqrt();
        let n = 20_001;
        let (lo, hi) = (mean - 12.0 * sd, mean + 12.0 * sd);
        let h = (hi - lo) / (n - 1) as f64;
        let mut oracle = 0.0;
        for i in 0..n {
            let x = lo + h * i as f64;
            let z = (x - mean) / sd;
            let dens = (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            oracle += w * h * dens * expit(x);
        }
        let got = ghq_expectation(GaussHermiteRule::default_rule(), mean, var, expit).unwrap();
        assert!(((got - oracle) / oracle).abs() < 1e-6, "{got} vs {oracle}");
    }

    #[test]
    fn non_finite_integrand_is_reported() {
        let rule = GaussHermiteRule::new(4).unwrap();
        let err = ghq_expectation(&rule, 0.0, 1.0, |x| if x > 0.0 { f64::NAN } else { x });
        assert!(matches!(err, Err(NumericsError::NonFinite(_))));
    }
}
