//! Stored posterior draws and their on-disk form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ChainOutput, SamplerConfig, SamplerError};
use crate::model::{from_unconstrained, HyperPriors, Layout, ModelParams, ModelSpec};

/// Per-chain sampler statistics after warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub step_size: f64,
    pub mean_accept: f64,
    pub divergences: usize,
    pub leapfrog_steps: u64,
}

impl From<&ChainOutput> for ChainStats {
    fn from(c: &ChainOutput) -> Self {
        Self { step_size: c.step_size, mean_accept: c.mean_accept(), divergences: c.divergences(), leapfrog_steps: c.leapfrog_steps }
    }
}

/// Post-warmup draws in unconstrained coordinates, one row per draw.
///
/// The first `n_params` columns are the model parameters in [`Layout`] order;
/// standardized latents follow when they were kept.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    names: Vec<String>,
    n_params: usize,
    n_periods: usize,
    outcome_periods: Vec<usize>,
    chain: Vec<usize>,
    values: Vec<Vec<f64>>,
    stats: Vec<ChainStats>,
}

impl PosteriorDraws {
    /// Collect chain output for `layout`, keeping latents only on request.
    pub fn from_chains(layout: &Layout, chains: &[ChainOutput], keep_latents: bool) -> Self {
        let n_params = layout.n_params();
        let names = if keep_latents { layout.all_names() } else { layout.param_names() };
        let width = names.len();
        let mut chain = Vec::new();
        let mut values = Vec::new();
        for (c, out) in chains.iter().enumerate() {
            for d in &out.draws {
                chain.push(c);
                values.push(d[..width].to_vec());
            }
        }
        Self {
            names,
            n_params,
            n_periods: layout.n_periods,
            outcome_periods: layout.outcome_periods.clone(),
            chain,
            values,
            stats: chains.iter().map(ChainStats::from).collect(),
        }
    }

    /// Assemble draws from parts. Parameter columns are recognised from the
    /// `eta1[t]` and `eta2[t]` names, which also fix the period structure.
    pub fn from_parts(names: Vec<String>, chain: Vec<usize>, values: Vec<Vec<f64>>) -> Result<Self, SamplerError> {
        let bad = |m: String| Err(SamplerError::Format(m));
        let parse_period = |name: &str, prefix: &str| -> Option<usize> { name.strip_prefix(prefix)?.strip_suffix(']')?.parse().ok() };
        let eta1: Vec<usize> = names.iter().map_while(|n| parse_period(n, "eta1[")).collect();
        let n_periods = eta1.len();
        if n_periods == 0 || eta1 != (1..=n_periods).collect::<Vec<_>>() {
            return bad("columns must start with eta1[1..T]".into());
        }
        let outcome_periods: Vec<usize> = names[n_periods..].iter().map_while(|n| parse_period(n, "eta2[")).collect();
        let layout = Layout { n_periods, outcome_periods: outcome_periods.clone(), n_clusters: 0, n_individuals: 0 };
        let expected = layout.param_names();
        let n_params = expected.len();
        if names.len() < n_params || names[..n_params] != expected[..] {
            return bad(format!("parameter columns must be {}", expected.join(",")));
        }
        if chain.len() != values.len() {
            return bad("chain labels and draws differ in length".into());
        }
        if let Some(k) = values.iter().position(|v| v.len() != names.len()) {
            return bad(format!("draw {k} has {} values, expected {}", values[k].len(), names.len()));
        }
        if chain.windows(2).any(|w| w[1] < w[0]) {
            return bad("draws must be grouped by chain in increasing order".into());
        }
        Ok(Self { names, n_params, n_periods, outcome_periods, chain, values, stats: Vec::new() })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn outcome_periods(&self) -> &[usize] {
        &self.outcome_periods
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_chains(&self) -> usize {
        self.chain.last().map_or(0, |c| c + 1)
    }

    pub fn chain_of(&self, draw: usize) -> usize {
        self.chain[draw]
    }

    pub fn chain_stats(&self) -> &[ChainStats] {
        &self.stats
    }

    pub fn set_chain_stats(&mut self, stats: Vec<ChainStats>) {
        self.stats = stats;
    }

    /// Unconstrained values of one draw.
    pub fn row(&self, draw: usize) -> &[f64] {
        &self.values[draw]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[k]).collect()
    }

    /// Column `k` split by chain.
    pub fn chains_of(&self, k: usize) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.n_chains()];
        for (c, v) in self.chain.iter().zip(&self.values) {
            out[*c].push(v[k]);
        }
        out
    }

    /// Constrained parameters of one draw.
    pub fn params(&self, draw: usize) -> ModelParams {
        from_unconstrained(&self.values[draw], self.n_periods, &self.outcome_periods)
    }

    /// Mean of a constrained scalar over all draws.
    pub fn posterior_mean(&self, f: impl Fn(&ModelParams) -> f64) -> f64 {
        (0..self.len()).map(|s| f(&self.params(s))).sum::<f64>() / self.len() as f64
    }

    /// Keep every `stride`-th draw of each chain.
    pub fn thinned(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        let mut chain = Vec::new();
        let mut values = Vec::new();
        let mut pos = 0;
        let mut last = usize::MAX;
        for (c, v) in self.chain.iter().zip(&self.values) {
            if *c != last {
                pos = 0;
                last = *c;
            }
            if pos % stride == 0 {
                chain.push(*c);
                values.push(v.clone());
            }
            pos += 1;
        }
        Self { chain, values, ..self.clone() }
    }

    /// CSV with header `draw,chain,<names>`; values use shortest round-trip formatting.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SamplerError> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<&str> = ["draw", "chain"].into_iter().chain(self.names.iter().map(String::as_str)).collect();
        w.write_record(&header)?;
        for (k, (c, v)) in self.chain.iter().zip(&self.values).enumerate() {
            let mut rec = vec![k.to_string(), c.to_string()];
            rec.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| SamplerError::Format(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, SamplerError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "draw" || &header[1] != "chain" {
            return Err(SamplerError::Format("header must start with draw,chain".into()));
        }
        let names: Vec<String> = header.iter().skip(2).map(String::from).collect();
        let mut chain = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| SamplerError::Format(format!("line {}: {e}", line + 2)));
            chain.push(rec[1].trim().parse::<usize>().map_err(|e| SamplerError::Format(format!("line {}: {e}", line + 2)))?);
            values.push(rec.iter().skip(2).map(parse).collect::<Result<Vec<_>, _>>()?);
        }
        Self::from_parts(names, chain, values)
    }
}

/// Everything needed to reproduce a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsManifest {
    pub data_sha256: String,
    pub n_clusters: usize,
    pub n_individuals: usize,
    pub n_periods: usize,
    pub outcome_periods: Vec<usize>,
    pub model: ModelSpec,
    pub priors: HyperPriors,
    pub sampler: SamplerConfig,
    pub chains: Vec<ChainStats>,
}
