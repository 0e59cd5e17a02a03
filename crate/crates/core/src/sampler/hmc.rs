//! Static-trajectory Hamiltonian Monte Carlo with jittered path length.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adapt::{DualAveraging, WindowSchedule, Welford};
use super::SamplerError;
use crate::numerics::{stream_rng, StreamRng};

/// Energy error beyond which a trajectory counts as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;
const INIT_ATTEMPTS: usize = 100;

/// A differentiable log density.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Value at `x`, writing the gradient into `grad`. Non-finite values are
    /// treated as zero density.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    /// Leapfrog steps per iteration are drawn uniformly from `1..=max_leapfrog`.
    pub max_leapfrog: usize,
    /// Variance of the random initialization in unconstrained space.
    pub init_variance: f64,
    /// Keep the standardized random effects in the draws.
    pub save_latents: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            samples: 1000,
            target_accept: 0.8,
            max_leapfrog: 32,
            init_variance: 0.1,
            save_latents: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn check(&self) -> Result<(), SamplerError> {
        if self.chains == 0 || self.samples == 0 || self.max_leapfrog == 0 {
            return Err(SamplerError::Config("chains, samples and max_leapfrog must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SamplerError::Config(format!("target_accept must lie in (0, 1), got {}", self.target_accept)));
        }
        if !(self.init_variance > 0.0 && self.init_variance.is_finite()) {
            return Err(SamplerError::Config("init_variance must be positive".into()));
        }
        Ok(())
    }
}

/// Post-warmup output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    /// `samples × dim` retained draws.
    pub draws: Vec<Vec<f64>>,
    pub accept_stat: Vec<f64>,
    pub divergent: Vec<bool>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub leapfrog_steps: u64,
}

impl ChainOutput {
    pub fn divergences(&self) -> usize {
        self.divergent.iter().filter(|&&d| d).count()
    }

    pub fn mean_accept(&self) -> f64 {
        self.accept_stat.iter().sum::<f64>() / self.accept_stat.len().max(1) as f64
    }
}

struct State {
    x: Vec<f64>,
    grad: Vec<f64>,
    lp: f64,
}

struct Chain<'a, T: LogDensity> {
    target: &'a T,
    rng: StreamRng,
    inv_metric: Vec<f64>,
    state: State,
    leapfrogs: u64,
}

impl<'a, T: LogDensity> Chain<'a, T> {
    fn init(target: &'a T, cfg: &SamplerConfig, chain: usize) -> Result<Self, SamplerError> {
        let dim = target.dim();
        let mut rng = stream_rng(cfg.seed, &[0x484d_43, chain as u64]);
        let sd = cfg.init_variance.sqrt();
        let mut grad = vec![0.0; dim];
        for _ in 0..INIT_ATTEMPTS {
            let x: Vec<f64> = (0..dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
            let lp = target.log_density_grad(&x, &mut grad);
            if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
                return Ok(Self { target, rng, inv_metric: vec![1.0; dim], state: State { x, grad, lp }, leapfrogs: 0 });
            }
        }
        Err(SamplerError::Initialization { chain, attempts: INIT_ATTEMPTS })
    }

    fn momentum(&mut self) -> Vec<f64> {
        let rng = &mut self.rng;
        self.inv_metric.iter().map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt()).collect()
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    /// Integrate `steps` leapfrog steps from the current state. Returns the
    /// proposal and its Hamiltonian, or `None` once the trajectory leaves the
    /// support.
    fn trajectory(&mut self, p: &mut [f64], eps: f64, steps: usize) -> Option<State> {
        let mut x = self.state.x.clone();
        let mut grad = self.state.grad.clone();
        let mut lp = self.state.lp;
        for _ in 0..steps {
            for (pi, g) in p.iter_mut().zip(&grad) {
                *pi += 0.5 * eps * g;
            }
            for ((xi, pi), m) in x.iter_mut().zip(p.iter()).zip(&self.inv_metric) {
                *xi += eps * m * pi;
            }
            lp = self.target.log_density_grad(&x, &mut grad);
            self.leapfrogs += 1;
            if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return None;
            }
            for (pi, g) in p.iter_mut().zip(&grad) {
                *pi += 0.5 * eps * g;
            }
        }
        Some(State { x, grad, lp })
    }

    /// One transition; returns (acceptance statistic, divergent).
    fn transition(&mut self, eps: f64, steps: usize) -> (f64, bool) {
        let mut p = self.momentum();
        let h0 = -self.state.lp + self.kinetic(&p);
        let Some(proposal) = self.trajectory(&mut p, eps, steps) else {
            return (0.0, true);
        };
        let h1 = -proposal.lp + self.kinetic(&p);
        let dh = h1 - h0;
        if !dh.is_finite() || dh > DIVERGENCE_THRESHOLD {
            return (0.0, true);
        }
        let accept = (-dh).exp().min(1.0);
        if self.rng.random::<f64>() < accept {
            self.state = proposal;
        }
        (accept, false)
    }

    /// Double or halve the step until a single leapfrog step crosses an
    /// acceptance probability of 0.8.
    fn reasonable_step(&mut self, mut eps: f64) -> f64 {
        let log_target = 0.8f64.ln();
        let delta_h = |chain: &mut Self, eps: f64| {
            let mut p = chain.momentum();
            let h0 = -chain.state.lp + chain.kinetic(&p);
            match chain.trajectory(&mut p, eps, 1) {
                Some(s) => h0 - (-s.lp + chain.kinetic(&p)),
                None => f64::NEG_INFINITY,
            }
        };
        let first = delta_h(self, eps);
        let up = first > log_target;
        for _ in 0..100 {
            eps = if up { 2.0 * eps } else { 0.5 * eps };
            let dh = delta_h(self, eps);
            if (up && !(dh > log_target)) || (!up && dh > log_target) {
                break;
            }
            if !(1e-12..=1e7).contains(&eps) {
                break;
            }
        }
        eps.clamp(1e-12, 1e7)
    }

    fn run(mut self, cfg: &SamplerConfig) -> ChainOutput {
        let dim = self.target.dim();
        let mut eps = self.reasonable_step(1.0);
        let mut da = DualAveraging::new(eps, cfg.target_accept);
        let windows = WindowSchedule::new(cfg.warmup);
        let mut welford = Welford::new(dim);
        let mut out = ChainOutput {
            draws: Vec::with_capacity(cfg.samples),
            accept_stat: Vec::with_capacity(cfg.samples),
            divergent: Vec::with_capacity(cfg.samples),
            step_size: eps,
            inv_metric: Vec::new(),
            leapfrog_steps: 0,
        };
        for it in 0..cfg.warmup {
            let steps = self.rng.random_range(1..=cfg.max_leapfrog);
            let (accept, _) = self.transition(eps, steps);
            eps = da.update(accept);
            if windows.in_slow_window(it) {
                welford.add(&self.state.x);
            }
            if windows.closes_window(it) {
                self.inv_metric = welford.regularized_variance();
                welford.reset();
                eps = self.reasonable_step(eps);
                da.restart(eps);
            }
        }
        if cfg.warmup > 0 {
            eps = da.final_step_size();
        }
        for _ in 0..cfg.samples {
            let steps = self.rng.random_range(1..=cfg.max_leapfrog);
            let (accept, divergent) = self.transition(eps, steps);
            out.draws.push(self.state.x.clone());
            out.accept_stat.push(accept);
            out.divergent.push(divergent);
        }
        out.step_size = eps;
        out.inv_metric = self.inv_metric;
        out.leapfrog_steps = self.leapfrogs;
        out
    }
}

/// Run `cfg.chains` independent chains; chains execute concurrently but each
/// owns a seed-derived stream, so the output does not depend on scheduling.
pub fn run_hmc<T: LogDensity>(target: &T, cfg: &SamplerConfig) -> Result<Vec<ChainOutput>, SamplerError> {
    cfg.check()?;
    if target.dim() == 0 {
        return Err(SamplerError::Config("target has dimension 0".into()));
    }
    (0..cfg.chains)
        .into_par_iter()
        .map(|c| Chain::init(target, cfg, c).map(|chain| chain.run(cfg)))
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Gaussian with diagonal precision scaled per coordinate.
    pub struct Gaussian {
        pub mean: Vec<f64>,
        pub precision: Vec<Vec<f64>>,
    }

    impl Gaussian {
        pub fn standard(dim: usize) -> Self {
            let precision = (0..dim).map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
            Self { mean: vec![0.0; dim], precision }
        }
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }

        fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            let d: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
            let mut lp = 0.0;
            for (i, row) in self.precision.iter().enumerate() {
                let pd: f64 = row.iter().zip(&d).map(|(p, v)| p * v).sum();
                grad[i] = -pd;
                lp -= 0.5 * d[i] * pd;
            }
            lp
        }
    }

    struct Nowhere;
    impl LogDensity for Nowhere {
        fn dim(&self) -> usize {
            2
        }
        fn log_density_grad(&self, _: &[f64], _: &mut [f64]) -> f64 {
            f64::NAN
        }
    }

    fn pooled(out: &[ChainOutput], k: usize) -> Vec<f64> {
        out.iter().flat_map(|c| c.draws.iter().map(move |d| d[k])).collect()
    }

    #[test]
    fn standard_normal_moments() {
        let cfg = SamplerConfig { seed: 1, warmup: 500, samples: 1000, ..Default::default() };
        let out = run_hmc(&Gaussian::standard(5), &cfg).unwrap();
        for k in 0..5 {
            let x = pooled(&out, k);
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let chains: Vec<Vec<f64>> = out.iter().map(|c| c.draws.iter().map(|d| d[k]).collect()).collect();
            let ess = super::super::diagnostics::ess_bulk(&chains).unwrap();
            assert!(mean.abs() < 4.0 * (1.0 / ess).sqrt(), "coord {k}: mean {mean}, ess {ess}");
            assert!((var - 1.0).abs() < 0.1, "coord {k}: var {var}");
        }
        assert!(out.iter().all(|c| c.divergences() == 0));
    }

    #[test]
    fn correlated_gaussian_covariance() {
        // Σ = [[1, 0.8], [0.8, 2]]; precision is its inverse.
        let (a, b, c) = (1.0, 0.8, 2.0);
        let det = a * c - b * b;
        let target = Gaussian { mean: vec![1.0, -2.0], precision: vec![vec![c / det, -b / det], vec![-b / det, a / det]] };
        let cfg = SamplerConfig { seed: 2, warmup: 500, samples: 2000, ..Default::default() };
        let out = run_hmc(&target, &cfg).unwrap();
        let (x, y) = (pooled(&out, 0), pooled(&out, 1));
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov = |u: &[f64], mu: f64, v: &[f64], mv: f64| u.iter().zip(v).map(|(a, b)| (a - mu) * (b - mv)).sum::<f64>() / (n - 1.0);
        let sxx = cov(&x, mx, &x, mx);
        let syy = cov(&y, my, &y, my);
        let sxy = cov(&x, mx, &y, my);
        // Standard errors of sample covariances for a Gaussian, inflated for
        // autocorrelation with a conservative effective size of n/4.
        let ne = n / 4.0;
        let se = |sii: f64, sjj: f64, sij: f64| ((sii * sjj + sij * sij) / ne).sqrt();
        assert!((sxx - a).abs() < 4.0 * se(a, a, a), "{sxx}");
        assert!((syy - c).abs() < 4.0 * se(c, c, c), "{syy}");
        assert!((sxy - b).abs() < 4.0 * se(a, c, b), "{sxy}");
    }

    #[test]
    fn same_seed_same_draws() {
        let cfg = SamplerConfig { seed: 9, warmup: 100, samples: 50, chains: 2, ..Default::default() };
        let a = run_hmc(&Gaussian::standard(3), &cfg).unwrap();
        let b = run_hmc(&Gaussian::standard(3), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn warmup_draws_are_not_retained() {
        let cfg = SamplerConfig { seed: 3, warmup: 77, samples: 33, chains: 3, ..Default::default() };
        let out = run_hmc(&Gaussian::standard(2), &cfg).unwrap();
        assert!(out.iter().all(|c| c.draws.len() == 33 && c.accept_stat.len() == 33));
    }

    #[test]
    fn one_dimensional_draws_pass_ks() {
        let cfg = SamplerConfig { seed: 4, warmup: 500, samples: 1000, ..Default::default() };
        let out = run_hmc(&Gaussian::standard(1), &cfg).unwrap();
        let mut x = pooled(&out, 0);
        x.sort_by(f64::total_cmp);
        let n = x.len() as f64;
        let ks = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = crate::numerics::std_normal_cdf(v);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // 99% null quantile 1.628/√n.
        assert!(ks < 1.628 / n.sqrt(), "KS {ks}");
    }

    #[test]
    fn undefined_target_fails_initialization() {
        let err = run_hmc(&Nowhere, &SamplerConfig { warmup: 10, samples: 10, ..Default::default() }).unwrap_err();
        assert!(matches!(err, SamplerError::Initialization { .. }));
    }
}
