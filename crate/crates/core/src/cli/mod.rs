//! The `swpce` command line: `simulate`, `fit`, `calibrate`, `pce`, `report`.
//!
//! Every command reads the run configuration plus earlier artifacts from the
//! workspace and writes its own artifacts there. Exit codes: 0 success,
//! 2 configuration or validation error, 3 sampler quality, 4 calibration
//! infeasible, 1 anything else.

mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, CalibrationError, CalibrationReport};
use crate::data::{content_sha256, load_csv, write_csv, DataError, TrialDataset};
use crate::model::ModelError;
use crate::pce::{pce_delta_sweep, pce_posterior, summary_rows, write_pce_csv, PceError, PceEstimate, PlotData, SummaryRow};
use crate::sampler::{fit, Diagnostics, DrawsManifest, PosteriorDraws, SamplerError};
use crate::simulate::{simulate_trial, SimulateError, TruthParams};

pub use config::{CalibrationOptions, Paths, RunConfig, SweepOptions};

pub const DATA_FILE: &str = "data.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const DRAWS_FILE: &str = "draws.csv";
pub const FIT_FILE: &str = "fit.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const PCE_FILE: &str = "pce.csv";
pub const PCE_SUMMARY_FILE: &str = "pce_summary.json";
pub const PCE_PLOT_FILE: &str = "pce_plot.json";
pub const SWEEP_FILE: &str = "pce_sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "pce_sweep_summary.json";
pub const SWEEP_PLOT_FILE: &str = "pce_sweep_plot.json";
pub const REPORT_FILE: &str = "report.txt";

/// A command failure with its process exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<SimulateError> for Failure {
    fn from(e: SimulateError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<SamplerError> for Failure {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Initialization { .. } => Self::new(3, e.to_string()),
            other => Self::config(other.to_string()),
        }
    }
}

impl From<CalibrationError> for Failure {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::Config(_) | CalibrationError::NoDraws => Self::config(e.to_string()),
            other => Self::new(4, format!("calibration infeasible: {other}")),
        }
    }
}

impl From<PceError> for Failure {
    fn from(e: PceError) -> Self {
        match e {
            PceError::Config(_) | PceError::Period { .. } | PceError::Rho(_) => Self::config(e.to_string()),
            PceError::Calibration(c) => c.into(),
            other => Self::new(1, other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "swpce", version, about = "Principal causal effects of a continuous mediator in stepped-wedge trials")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory holding all artifacts; overrides the config.
    #[arg(long, global = true)]
    pub workspace: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override any config key, e.g. `--set sampler.chains=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a trial and write the dataset and its truth.
    Simulate,
    /// Sample the posterior of the observed-data model.
    Fit {
        /// Dataset CSV; defaults to the workspace dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Calibrate the sensitivity parameters from the data and the draws.
    Calibrate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also report `ρ*` per transition period.
        #[arg(long)]
        per_period: bool,
    },
    /// Compute PCEs over the calibrated grid.
    Pce {
        /// Sweep the cutoff of the default strata instead.
        #[arg(long)]
        delta_sweep: bool,
        /// Solve Δ at every sampled pair instead of interpolating.
        #[arg(long)]
        exact_delta: bool,
        /// Copula pairs per draw and cell.
        #[arg(long)]
        mc_size: Option<usize>,
        /// Use every k-th posterior draw.
        #[arg(long)]
        thin: Option<usize>,
    },
    /// Render a text summary of the workspace.
    Report,
}

/// Parse arguments and run; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(out) => {
            if !out.is_empty() {
                // A closed pipe (e.g. `| head`) is not an error.
                let _ = writeln!(std::io::stdout(), "{out}");
            }
            0
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Run a parsed command; returns the text to print on success.
pub fn run(cli: &Cli) -> Result<String, Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(w) = &cli.workspace {
        cfg.paths.workspace = Some(w.clone());
    }
    if let Some(n) = cli.threads {
        // Only the first call can size the global pool; later calls keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Simulate => cmd_simulate(&cfg),
        Command::Fit { data, chains, warmup, samples } => {
            if let Some(d) = data {
                cfg.paths.data = Some(d.clone());
            }
            cfg.sampler.chains = chains.unwrap_or(cfg.sampler.chains);
            cfg.sampler.warmup = warmup.unwrap_or(cfg.sampler.warmup);
            cfg.sampler.samples = samples.unwrap_or(cfg.sampler.samples);
            cmd_fit(&cfg)
        }
        Command::Calibrate { data, per_period } => {
            if let Some(d) = data {
                cfg.paths.data = Some(d.clone());
            }
            cfg.calibration.per_period |= per_period;
            cmd_calibrate(&cfg)
        }
        Command::Pce { delta_sweep, exact_delta, mc_size, thin } => {
            cfg.pce.exact_delta |= exact_delta;
            cfg.pce.mc_size = mc_size.unwrap_or(cfg.pce.mc_size);
            cfg.pce.thin = thin.unwrap_or(cfg.pce.thin);
            cmd_pce(&cfg, *delta_sweep)
        }
        Command::Report => cmd_report(&cfg),
    }
}

fn ensure_workspace(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let ws = cfg.workspace();
    fs::create_dir_all(&ws).map_err(|e| Failure::config(format!("cannot create workspace {}: {e}", ws.display())))?;
    Ok(ws)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::new(1, format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(1, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_artifact(path: &Path, what: &str) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::config(format!("missing artifact {what} ({}): {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T, Failure> {
    let bytes = read_artifact(path, what)?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::config(format!("malformed artifact {what} ({}): {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<TrialDataset, Failure> {
    load_csv(path).map_err(|e| match e {
        DataError::Invalid(report) => Failure::config(format!("dataset {} failed validation:\n{report}", path.display())),
        other => Failure::config(format!("dataset {}: {other}", path.display())),
    })
}

fn load_draws(ws: &Path) -> Result<PosteriorDraws, Failure> {
    let bytes = read_artifact(&ws.join(DRAWS_FILE), DRAWS_FILE)?;
    PosteriorDraws::read_csv(bytes.as_slice()).map_err(|e| Failure::config(format!("{DRAWS_FILE}: {e}")))
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthArtifact {
    config: RunConfig,
    data_sha256: String,
    truth: TruthParams,
    implied_rho: f64,
}

fn cmd_simulate(cfg: &RunConfig) -> Result<String, Failure> {
    let seed = cfg.seed()?;
    let truth = cfg.truth();
    let data = simulate_trial(&cfg.design, &truth, seed)?;
    let ws = ensure_workspace(cfg)?;
    let mut buf = Vec::new();
    write_csv(&mut buf, data.records())?;
    write_bytes(&ws.join(DATA_FILE), &buf)?;
    let artifact = TruthArtifact { config: cfg.clone(), data_sha256: content_sha256(data.records())?, implied_rho: truth.implied_rho(), truth };
    write_json(&ws.join(TRUTH_FILE), &artifact)?;
    Ok(format!(
        "simulated {} clusters × {} individuals × {} periods → {}",
        data.n_clusters(),
        data.n_individuals() / data.n_clusters().max(1),
        data.n_periods(),
        ws.join(DATA_FILE).display()
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct FitArtifact {
    config: RunConfig,
    manifest: DrawsManifest,
    diagnostics: serde_json::Value,
}

fn diagnostics_table(d: &Diagnostics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<20} {:>10} {:>10} {:>8} {:>8}", "coordinate", "mean", "sd", "R-hat", "ESS");
    for c in &d.coordinates {
        let rhat = c.rhat.map_or("-".to_string(), |r| format!("{r:.3}"));
        let ess = c.ess_bulk.map_or("-".to_string(), |e| format!("{e:.0}"));
        let _ = writeln!(out, "{:<20} {:>10.4} {:>10.4} {:>8} {:>8}", c.name, c.mean, c.sd, rhat, ess);
    }
    let _ = write!(out, "divergences: {} of {} draws", d.divergences, d.total_draws);
    out
}

fn cmd_fit(cfg: &RunConfig) -> Result<String, Failure> {
    let mut cfg = cfg.clone();
    cfg.sampler.seed = cfg.seed()?;
    let data = load_dataset(&cfg.data_path())?;
    if data.n_clusters() < 2 {
        return Err(Failure::config(format!("need at least 2 clusters, dataset has {}", data.n_clusters())));
    }
    let out = fit(&data, &cfg.model, &cfg.priors, &cfg.sampler)?;
    let ws = ensure_workspace(&cfg)?;
    let mut buf = Vec::new();
    out.draws.write_csv(&mut buf)?;
    write_bytes(&ws.join(DRAWS_FILE), &buf)?;
    let diagnostics = serde_json::to_value(&out.diagnostics).map_err(|e| Failure::new(1, e.to_string()))?;
    write_json(&ws.join(FIT_FILE), &FitArtifact { config: cfg.clone(), manifest: out.manifest, diagnostics })?;
    let table = diagnostics_table(&out.diagnostics);
    if out.diagnostics.divergence_storm() {
        return Err(Failure::new(3, format!("{table}\ndivergence rate {:.1}% exceeds 20%", 100.0 * out.diagnostics.divergence_rate)));
    }
    Ok(table)
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibrationArtifact {
    config: RunConfig,
    data_sha256: String,
    calibration: CalibrationReport,
}

fn cmd_calibrate(cfg: &RunConfig) -> Result<String, Failure> {
    let data = load_dataset(&cfg.data_path())?;
    let ws = cfg.workspace();
    let draws = load_draws(&ws)?;
    let mut report = calibrate(&data, &draws, cfg.calibration.per_period)?;
    report.sensitivity.per_draw_upper = cfg.calibration.per_draw_upper;
    let ws = ensure_workspace(cfg)?;
    let artifact = CalibrationArtifact { config: cfg.clone(), data_sha256: content_sha256(data.records())?, calibration: report };
    write_json(&ws.join(CALIBRATION_FILE), &artifact)?;
    let c = &artifact.calibration;
    Ok(format!(
        "rho* = {:.4} from {} transition pairs; grid {:?}\nlambda0 in [{:.4}, {:.4}]{}\nlambda1 in [{:.4}, {:.4}]{}",
        c.rho.rho_star,
        c.rho.n_pairs,
        c.rho_grid,
        c.lambda0.lower,
        c.lambda0.upper,
        c.lambda0.fallback.as_deref().map(|f| format!(" (fallback: {f})")).unwrap_or_default(),
        c.lambda1.lower,
        c.lambda1.upper,
        c.lambda1.fallback.as_deref().map(|f| format!(" (fallback: {f})")).unwrap_or_default(),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryArtifact {
    config: RunConfig,
    summaries: Vec<SummaryRow>,
    failures: usize,
    empty_strata: usize,
}

fn cmd_pce(cfg: &RunConfig, sweep: bool) -> Result<String, Failure> {
    let mut cfg = cfg.clone();
    cfg.pce.seed = cfg.seed()?;
    let ws = cfg.workspace();
    let draws = load_draws(&ws)?;
    let calibration: CalibrationArtifact = read_json(&ws.join(CALIBRATION_FILE), CALIBRATION_FILE)?;
    if let Ok(bytes) = fs::read(ws.join(FIT_FILE)) {
        let fit: FitArtifact = serde_json::from_slice(&bytes).map_err(|e| Failure::config(format!("malformed artifact {FIT_FILE}: {e}")))?;
        if fit.manifest.model.mediator_lag != 0 {
            return Err(Failure::config("PCEs are defined for the contemporaneous mediator; refit with model.mediator_lag = 0"));
        }
    }
    let mut sensitivity = calibration.calibration.sensitivity;
    sensitivity.per_draw_upper |= cfg.calibration.per_draw_upper;
    let ws = ensure_workspace(&cfg)?;
    let (rows, plot, files): (Vec<(Option<f64>, PceEstimate)>, PlotData, [&str; 3]) = if sweep {
        let out = pce_delta_sweep(&draws, &sensitivity, &cfg.pce, &cfg.sweep.deltas)?;
        let plot = PlotData::by_delta(&out);
        (out.into_iter().map(|(d, e)| (Some(d), e)).collect(), plot, [SWEEP_FILE, SWEEP_SUMMARY_FILE, SWEEP_PLOT_FILE])
    } else {
        let est = pce_posterior(&draws, &sensitivity, &cfg.pce)?;
        let plot = PlotData::by_period(&est);
        (vec![(None, est)], plot, [PCE_FILE, PCE_SUMMARY_FILE, PCE_PLOT_FILE])
    };
    let refs: Vec<(Option<f64>, &PceEstimate)> = rows.iter().map(|(d, e)| (*d, e)).collect();
    let mut buf = Vec::new();
    write_pce_csv(&mut buf, &refs)?;
    write_bytes(&ws.join(files[0]), &buf)?;
    let summaries = summary_rows(&refs);
    let count = |empty: bool| rows.iter().flat_map(|(_, e)| &e.failures).filter(|f| f.empty == empty).count();
    let artifact = SummaryArtifact { config: cfg.clone(), summaries, failures: count(false), empty_strata: count(true) };
    write_json(&ws.join(files[1]), &artifact)?;
    write_json(&ws.join(files[2]), &plot)?;
    Ok(summary_table(&artifact.summaries))
}

fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let with_delta = rows.iter().any(|r| r.delta.is_some());
    if with_delta {
        let _ = write!(out, "{:>6} ", "delta");
    }
    let _ = writeln!(out, "{:>6} {:<8} {:<18} {:>7} {:>9} {:>21}", "period", "stratum", "bounds", "rho", "mean", "95% interval");
    for r in rows {
        let s = &r.summary;
        if let Some(d) = r.delta {
            let _ = write!(out, "{d:>6} ");
        }
        let _ = writeln!(
            out,
            "{:>6} {:<8} {:<18} {:>7.3} {:>9.4} {:>21}",
            s.period,
            s.interval,
            s.bounds.to_string(),
            s.rho,
            s.mean,
            format!("[{:.4}, {:.4}]", s.q025, s.q975)
        );
    }
    out.pop();
    out
}

fn cmd_report(cfg: &RunConfig) -> Result<String, Failure> {
    let ws = cfg.workspace();
    read_artifact(&ws.join(DRAWS_FILE), DRAWS_FILE)?;
    let fit: FitArtifact = read_json(&ws.join(FIT_FILE), FIT_FILE)?;
    let calibration: CalibrationArtifact = read_json(&ws.join(CALIBRATION_FILE), CALIBRATION_FILE)?;
    let summary: SummaryArtifact = read_json(&ws.join(PCE_SUMMARY_FILE), PCE_SUMMARY_FILE)?;
    let mut out = String::new();
    let _ = writeln!(out, "Artifacts");
    for f in [DATA_FILE, TRUTH_FILE, DRAWS_FILE, FIT_FILE, CALIBRATION_FILE, PCE_FILE, PCE_SUMMARY_FILE, PCE_PLOT_FILE, SWEEP_FILE, SWEEP_SUMMARY_FILE, SWEEP_PLOT_FILE] {
        if ws.join(f).exists() {
            let _ = writeln!(out, "  {f}");
        }
    }
    let m = &fit.manifest;
    let _ = writeln!(out, "\nFit: {} clusters, {} individuals, {} periods; data sha256 {}", m.n_clusters, m.n_individuals, m.n_periods, m.data_sha256);
    let divergences: usize = m.chains.iter().map(|c| c.divergences).sum();
    let _ = writeln!(out, "  {} chains × {} draws, {} divergences", m.chains.len(), m.sampler.samples, divergences);
    let c = &calibration.calibration;
    let _ = writeln!(out, "\nCalibration: rho* = {:.4} ({} transition pairs), grid {:?}", c.rho.rho_star, c.rho.n_pairs, c.rho_grid);
    let _ = writeln!(out, "  lambda0 in [{:.4}, {:.4}]{}", c.lambda0.lower, c.lambda0.upper, if c.lambda0.fallback.is_some() { " (midpoint)" } else { "" });
    let _ = writeln!(out, "  lambda1 in [{:.4}, {:.4}]{}", c.lambda1.lower, c.lambda1.upper, if c.lambda1.fallback.is_some() { " (midpoint)" } else { "" });
    let _ = writeln!(out, "\nPrincipal causal effects (posterior mean, 95% credible interval)");
    let _ = writeln!(out, "{}", summary_table(&summary.summaries));
    if summary.failures > 0 {
        let _ = writeln!(out, "{} cells failed and were skipped", summary.failures);
    }
    if summary.empty_strata > 0 {
        let _ = writeln!(out, "{} cells skipped because the stratum had no mass", summary.empty_strata);
    }
    let ws = ensure_workspace(cfg)?;
    write_bytes(&ws.join(REPORT_FILE), out.as_bytes())?;
    Ok(out.trim_end().to_string())
}
