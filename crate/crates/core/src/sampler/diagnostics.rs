//! Convergence diagnostics: rank-normalized split-R̂ and bulk effective sample size.

use serde::Serialize;

use super::PosteriorDraws;
use crate::numerics::std_normal_quantile;

/// R̂ above this value triggers a warning.
pub const RHAT_WARN: f64 = 1.01;
/// Bulk ESS below this value triggers a warning.
pub const ESS_WARN: f64 = 400.0;
/// Post-warmup divergence rate above which the fit is flagged.
pub const DIVERGENCE_WARN_RATE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Absent for a single chain or a constant coordinate.
    pub rhat: Option<f64>,
    pub ess_bulk: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub coordinates: Vec<CoordinateDiagnostics>,
    pub chains: usize,
    pub total_draws: usize,
    pub divergences: usize,
    pub divergence_rate: f64,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    pub fn max_rhat(&self) -> Option<f64> {
        self.coordinates.iter().filter_map(|c| c.rhat).reduce(f64::max)
    }

    pub fn min_ess(&self) -> Option<f64> {
        self.coordinates.iter().filter_map(|c| c.ess_bulk).reduce(f64::min)
    }

    pub fn divergence_storm(&self) -> bool {
        self.divergence_rate > DIVERGENCE_WARN_RATE
    }

    pub fn get(&self, name: &str) -> Option<&CoordinateDiagnostics> {
        self.coordinates.iter().find(|c| c.name == name)
    }
}

/// Diagnostics for every parameter column of `draws` (latents are skipped).
pub fn diagnose(draws: &PosteriorDraws) -> Diagnostics {
    let mut warnings = Vec::new();
    let coordinates: Vec<CoordinateDiagnostics> = (0..draws.n_params())
        .map(|k| {
            let chains = draws.chains_of(k);
            let all: Vec<f64> = chains.iter().flatten().copied().collect();
            let n = all.len() as f64;
            let mean = all.iter().sum::<f64>() / n;
            let sd = if all.len() > 1 { (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            let rhat = split_rhat(&chains);
            let ess_bulk = ess_bulk(&chains);
            let name = draws.names()[k].clone();
            if let Some(r) = rhat.filter(|r| *r > RHAT_WARN) {
                warnings.push(format!("{name}: R-hat {r:.3} exceeds {RHAT_WARN}"));
            }
            if let Some(e) = ess_bulk.filter(|e| *e < ESS_WARN) {
                warnings.push(format!("{name}: bulk ESS {e:.0} below {ESS_WARN}"));
            }
            CoordinateDiagnostics { name, mean, sd, rhat, ess_bulk }
        })
        .collect();
    let divergences: usize = draws.chain_stats().iter().map(|s| s.divergences).sum();
    let total_draws = draws.len();
    let divergence_rate = divergences as f64 / total_draws.max(1) as f64;
    if divergence_rate > DIVERGENCE_WARN_RATE {
        warnings.push(format!("{divergences} divergent transitions after warmup ({:.2}%)", 100.0 * divergence_rate));
    }
    Diagnostics { coordinates, chains: draws.n_chains(), total_draws, divergences, divergence_rate, warnings }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Split each chain into halves, dropping the middle draw of odd lengths.
fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    chains.iter().flat_map(|c| [c[..half].to_vec(), c[n - half..n].to_vec()]).collect()
}

/// Replace values by normal scores of their pooled fractional ranks
/// `Φ⁻¹((r - 3/8) / (S + 1/4))`; ties share the average rank.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let flat: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = flat.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]));
    let mut rank = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && flat[order[j + 1]] == flat[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            rank[k] = avg;
        }
        i = j + 1;
    }
    let mut out = Vec::with_capacity(chains.len());
    let mut k = 0;
    for c in chains {
        out.push(
            (0..c.len())
                .map(|_| {
                    let z = std_normal_quantile((rank[k] - 0.375) / (s as f64 + 0.25));
                    k += 1;
                    z
                })
                .collect(),
        );
    }
    out
}

fn usable(chains: &[Vec<f64>]) -> bool {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 4 || chains.iter().flatten().any(|x| !x.is_finite()) {
        return false;
    }
    let first = chains[0][0];
    chains.iter().flatten().any(|&x| x != first)
}

fn rhat_raw(split: &[Vec<f64>]) -> Option<f64> {
    let m = split.len() as f64;
    let n = split[0].len() as f64;
    let means: Vec<f64> = split.iter().map(|c| mean(c)).collect();
    let b = n * var(&means);
    let w = mean(&split.iter().map(|c| var(c)).collect::<Vec<_>>());
    if !(w > 0.0) || m < 2.0 {
        return None;
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Some((var_plus / w).sqrt())
}

/// Rank-normalized split-R̂. Absent for fewer than two chains, fewer than
/// four draws per chain, or a constant coordinate.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.len() < 2 || !usable(chains) {
        return None;
    }
    rhat_raw(&rank_normalize(&split(chains)))
}

fn autocovariance(x: &[f64], lag: usize) -> f64 {
    let m = mean(x);
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Effective sample size of a set of chains via Geyer's initial monotone
/// sequence estimator. Capped at the total number of draws.
fn ess_raw(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len();
    let n = chains[0].len();
    if n < 4 {
        return None;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let vars: Vec<f64> = chains.iter().map(|c| var(c)).collect();
    let mean_var = mean(&vars);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += var(&means);
    }
    if !(var_plus > 0.0) {
        return None;
    }
    let acov_mean = |lag: usize| mean(&chains.iter().map(|c| autocovariance(c, lag)).collect::<Vec<_>>());
    let rho = |lag: usize| 1.0 - (mean_var - acov_mean(lag)) / var_plus;

    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    let mut s = 1;
    while s < n - 4 && even + odd > 0.0 {
        even = rho(s + 1);
        odd = rho(s + 2);
        if even + odd >= 0.0 {
            rho_hat[s + 1] = even;
            rho_hat[s + 2] = odd;
        }
        s += 2;
    }
    let max_s = s;
    // Enforce a monotone sequence of pair sums.
    let mut k = 1;
    while k + 2 <= max_s.saturating_sub(1) {
        let prev = rho_hat[k - 1] + rho_hat[k];
        if rho_hat[k + 1] + rho_hat[k + 2] > prev {
            rho_hat[k + 1] = prev / 2.0;
            rho_hat[k + 2] = prev / 2.0;
        }
        k += 2;
    }
    let tail = if max_s + 1 < n { rho_hat[max_s + 1] } else { 0.0 };
    let tau = -1.0 + 2.0 * rho_hat[..max_s].iter().sum::<f64>() + tail;
    let total = (m * n) as f64;
    let tau = tau.max(1.0 / total.log10().max(1.0));
    Some((total / tau).min(total))
}

/// Bulk effective sample size on rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.is_empty() || !usable(chains) {
        return None;
    }
    let total: usize = chains.iter().map(Vec::len).sum();
    ess_raw(&rank_normalize(&split(chains))).map(|e| e.min(total as f64))
}
