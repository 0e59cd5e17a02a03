//! Log joint density and its analytic gradient in unconstrained coordinates.

use super::params::{from_unconstrained, log1m_tanh_sq, N_SCALAR};
use super::{HyperPriors, LatentEffects, ModelData, ModelError, ModelParams};
use crate::numerics::{expit, softplus};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// The additive pieces of the log joint.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LogJointTerms {
    pub mediator: f64,
    pub outcome: f64,
    pub latent: f64,
    pub prior: f64,
    pub jacobian: f64,
}

impl LogJointTerms {
    pub fn total(&self) -> f64 {
        self.mediator + self.outcome + self.latent + self.prior + self.jacobian
    }
}

fn normal_logpdf(x: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + x * x / var)
}

fn prior_terms(p: &ModelParams, hp: &HyperPriors) -> f64 {
    let scalars = [p.gamma1, p.beta1, p.beta2, p.beta3, p.beta4];
    let normal: f64 = p.eta1.iter().chain(&p.eta2).chain(&scalars).map(|&x| normal_logpdf(x, hp.fixed_effect_variance)).sum();
    let sds = [p.sigma_eps, p.alpha.sd1, p.alpha.sd2, p.phi.sd1, p.phi.sd2];
    let expo: f64 = sds.iter().map(|s| hp.sd_rate.ln() - hp.sd_rate * s).sum();
    // Uniform(-1, 1) on each correlation.
    normal + expo - 2.0 * std::f64::consts::LN_2
}

/// Log joint of parameters, latents and data, in constrained coordinates
/// (no Jacobian term), split into its parts.
pub fn log_joint(p: &ModelParams, latents: &LatentEffects, data: &ModelData, hp: &HyperPriors) -> Result<LogJointTerms, ModelError> {
    p.check()?;
    let l = &data.layout;
    if latents.z_alpha.len() != l.n_clusters || latents.z_phi.len() != l.n_individuals {
        return Err(ModelError::Dimension {
            got: 2 * (latents.z_alpha.len() + latents.z_phi.len()),
            want: 2 * (l.n_clusters + l.n_individuals),
        });
    }
    let alpha = latents.cluster_effects(p);
    let phi = latents.individual_effects(p);
    let var_eps = p.sigma_eps * p.sigma_eps;
    let mut terms = LogJointTerms::default();
    for r in &data.mediator_rows {
        let mean = p.eta1[r.period - 1] + p.gamma1 * f64::from(u8::from(r.treatment)) + alpha[r.cluster].0 + phi[r.individual].0;
        terms.mediator += normal_logpdf(r.mediator - mean, var_eps);
    }
    for r in &data.outcome_rows {
        let lp = outcome_predictor(p, r.eta2_index, r.treatment, r.prev_treatment, r.mediator)
            + alpha[r.cluster].1
            + phi[r.individual].1;
        terms.outcome += if r.outcome { -softplus(-lp) } else { -softplus(lp) };
    }
    terms.latent = latents.flatten().iter().map(|z| -0.5 * (LN_2PI + z * z)).sum();
    terms.prior = prior_terms(p, hp);
    Ok(terms)
}

fn outcome_predictor(p: &ModelParams, k: usize, z: bool, zprev: bool, m: f64) -> f64 {
    let (z, zp) = (f64::from(u8::from(z)), f64::from(u8::from(zprev)));
    p.eta2[k] + p.beta1 * z + p.beta2 * m + p.beta3 * z * m + p.beta4 * zp * m
}

/// Log posterior (up to a constant) and gradient at the full unconstrained vector `v`.
pub fn log_joint_grad(v: &[f64], data: &ModelData, hp: &HyperPriors) -> Result<(f64, Vec<f64>), ModelError> {
    let post = Posterior::new(data.clone(), *hp)?;
    let mut grad = vec![0.0; v.len()];
    let value = post.log_density_grad(v, &mut grad)?;
    Ok((value, grad))
}

/// The posterior over all unconstrained coordinates, ready for HMC.
#[derive(Debug, Clone)]
pub struct Posterior {
    data: ModelData,
    hp: HyperPriors,
}

impl Posterior {
    pub fn new(data: ModelData, hp: HyperPriors) -> Result<Self, ModelError> {
        hp.check()?;
        Ok(Self { data, hp })
    }

    pub fn data(&self) -> &ModelData {
        &self.data
    }

    pub fn hyper_priors(&self) -> &HyperPriors {
        &self.hp
    }

    pub fn dim(&self) -> usize {
        self.data.layout.dim()
    }

    fn check_dim(&self, n: usize) -> Result<(), ModelError> {
        if n != self.dim() {
            return Err(ModelError::Dimension { got: n, want: self.dim() });
        }
        Ok(())
    }

    /// Constrained parameters encoded in `v`.
    pub fn params(&self, v: &[f64]) -> ModelParams {
        let l = &self.data.layout;
        from_unconstrained(v, l.n_periods, &l.outcome_periods)
    }

    /// All terms, including the Jacobian of the unconstrained transform.
    pub fn terms(&self, v: &[f64]) -> Result<LogJointTerms, ModelError> {
        self.check_dim(v.len())?;
        let p = self.params(v);
        let latents = LatentEffects::from_vector(v, &self.data.layout);
        let mut terms = log_joint(&p, &latents, &self.data, &self.hp)?;
        terms.jacobian = super::log_jacobian(v, self.data.layout.scalars());
        Ok(terms)
    }

    pub fn log_density(&self, v: &[f64]) -> Result<f64, ModelError> {
        Ok(self.terms(v)?.total())
    }

    /// Value and gradient; `grad` is overwritten.
    pub fn log_density_grad(&self, v: &[f64], grad: &mut [f64]) -> Result<f64, ModelError> {
        self.check_dim(v.len())?;
        self.check_dim(grad.len())?;
        grad.fill(0.0);
        let l = &self.data.layout;
        let hp = &self.hp;
        let k0 = l.scalars();
        let s = &v[k0..k0 + N_SCALAR];
        let (gamma1, beta1, beta2, beta3, beta4) = (s[0], s[1], s[2], s[3], s[4]);
        let sigma_eps = s[5].exp();
        let (sa1, sa2, ra) = (s[6].exp(), s[7].exp(), s[8].tanh());
        let (sp1, sp2, rp) = (s[9].exp(), s[10].exp(), s[11].tanh());
        let (ca, cp) = ((1.0 - ra * ra).max(0.0).sqrt(), (1.0 - rp * rp).max(0.0).sqrt());

        let (za, zp) = (l.z_alpha(), l.z_phi());
        let effect = |base: usize, idx: usize, s1: f64, s2: f64, r: f64, c: f64| {
            let (z1, z2) = (v[base + 2 * idx], v[base + 2 * idx + 1]);
            (s1 * z1, s2 * (r * z1 + c * z2))
        };
        let alpha: Vec<(f64, f64)> = (0..l.n_clusters).map(|j| effect(za, j, sa1, sa2, ra, ca)).collect();
        let phi: Vec<(f64, f64)> = (0..l.n_individuals).map(|i| effect(zp, i, sp1, sp2, rp, cp)).collect();
        // Gradients with respect to the effects themselves.
        let mut g_alpha = vec![(0.0, 0.0); l.n_clusters];
        let mut g_phi = vec![(0.0, 0.0); l.n_individuals];

        let mut value = 0.0;
        let inv_var = 1.0 / (sigma_eps * sigma_eps);
        let mut sum_sq = 0.0;
        for r in &self.data.mediator_rows {
            let z = f64::from(u8::from(r.treatment));
            let resid = r.mediator - v[r.period - 1] - gamma1 * z - alpha[r.cluster].0 - phi[r.individual].0;
            sum_sq += resid * resid;
            let g = resid * inv_var;
            grad[r.period - 1] += g;
            grad[k0] += g * z;
            g_alpha[r.cluster].0 += g;
            g_phi[r.individual].0 += g;
        }
        let n_m = self.data.mediator_rows.len() as f64;
        value += -0.5 * n_m * LN_2PI - n_m * s[5] - 0.5 * sum_sq * inv_var;
        grad[k0 + 5] += -n_m + sum_sq * inv_var;

        for r in &self.data.outcome_rows {
            let (z, zprev) = (f64::from(u8::from(r.treatment)), f64::from(u8::from(r.prev_treatment)));
            let m = r.mediator;
            let lp = v[l.n_periods + r.eta2_index]
                + beta1 * z
                + beta2 * m
                + beta3 * z * m
                + beta4 * zprev * m
                + alpha[r.cluster].1
                + phi[r.individual].1;
            value += if r.outcome { -softplus(-lp) } else { -softplus(lp) };
            let g = f64::from(u8::from(r.outcome)) - expit(lp);
            grad[l.n_periods + r.eta2_index] += g;
            grad[k0 + 1] += g * z;
            grad[k0 + 2] += g * m;
            grad[k0 + 3] += g * z * m;
            grad[k0 + 4] += g * zprev * m;
            g_alpha[r.cluster].1 += g;
            g_phi[r.individual].1 += g;
        }

        // Chain rule from effects to standardized latents and scale parameters:
        // e1 = s1 z1, e2 = s2 (ρ z1 + c z2), ρ = tanh w, c = sqrt(1 - ρ²).
        let mut backprop = |base: usize, effects: &[(f64, f64)], g_eff: &[(f64, f64)], idx: usize, s1: f64, s2: f64, r: f64, c: f64| {
            let (mut g_ls1, mut g_ls2, mut g_w) = (0.0, 0.0, 0.0);
            for (k, (&(e1, e2), &(g1, g2))) in effects.iter().zip(g_eff).enumerate() {
                let (z1, z2) = (v[base + 2 * k], v[base + 2 * k + 1]);
                grad[base + 2 * k] += g1 * s1 + g2 * s2 * r;
                grad[base + 2 * k + 1] += g2 * s2 * c;
                g_ls1 += g1 * e1;
                g_ls2 += g2 * e2;
                g_w += g2 * s2 * (c * c * z1 - r * c * z2);
            }
            grad[k0 + idx] += g_ls1;
            grad[k0 + idx + 1] += g_ls2;
            grad[k0 + idx + 2] += g_w;
        };
        backprop(za, &alpha, &g_alpha, 6, sa1, sa2, ra, ca);
        backprop(zp, &phi, &g_phi, 9, sp1, sp2, rp, cp);

        // Standard normal latents.
        for k in za..l.dim() {
            value += -0.5 * (LN_2PI + v[k] * v[k]);
            grad[k] -= v[k];
        }

        // Priors on fixed effects.
        let var0 = hp.fixed_effect_variance;
        for k in (0..k0).chain(k0..k0 + 5) {
            value += normal_logpdf(v[k], var0);
            grad[k] -= v[k] / var0;
        }
        // Exponential priors on scales plus the log Jacobian `u`.
        for (idx, sd) in [(5, sigma_eps), (6, sa1), (7, sa2), (9, sp1), (10, sp2)] {
            value += hp.sd_rate.ln() - hp.sd_rate * sd + s[idx];
            grad[k0 + idx] += -hp.sd_rate * sd + 1.0;
        }
        // Uniform correlations plus the log Jacobian log(1 - ρ²).
        for (idx, r) in [(8, ra), (11, rp)] {
            value += -std::f64::consts::LN_2 + log1m_tanh_sq(s[idx]);
            grad[k0 + idx] += -2.0 * r;
        }
        Ok(value)
    }
}
