//! Run configuration: one TOML file, overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Failure;
use crate::model::{HyperPriors, ModelSpec};
use crate::pce::{default_deltas, PceQuery};
use crate::sampler::SamplerConfig;
use crate::simulate::{DesignSpec, TruthParams};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Input dataset for `fit` and `calibrate`; defaults to `<workspace>/data.csv`.
    pub data: Option<PathBuf>,
    pub workspace: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationOptions {
    /// Also estimate `ρ*` separately for each transition period.
    pub per_period: bool,
    /// Use each draw's `β_2`, `β_2 + β_3` as the `λ` upper bounds.
    pub per_draw_upper: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    pub deltas: Vec<f64>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { deltas: default_deltas() }
    }
}

/// Everything a command reads from configuration. Paths are not echoed into
/// outputs so artifacts do not depend on where the workspace lives.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(skip_serializing)]
    pub paths: Paths,
    pub design: DesignSpec,
    /// Simulation truth; defaults to [`TruthParams::example`] for the design's periods.
    pub truth: Option<TruthParams>,
    pub model: ModelSpec,
    pub priors: HyperPriors,
    pub sampler: SamplerConfig,
    pub calibration: CalibrationOptions,
    pub pce: PceQuery,
    pub sweep: SweepOptions,
}

impl RunConfig {
    /// Read `path` (if any), apply dotted `key=value` overrides, and deserialize.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Failure::config(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Failure::config(format!("config: {e}")))
    }

    pub fn seed(&self) -> Result<u64, Failure> {
        self.seed.ok_or_else(|| Failure::config("missing required field `seed` (set it in the config or pass --seed)"))
    }

    pub fn workspace(&self) -> PathBuf {
        self.paths.workspace.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn data_path(&self) -> PathBuf {
        self.paths.data.clone().unwrap_or_else(|| self.workspace().join(super::DATA_FILE))
    }

    pub fn truth(&self) -> TruthParams {
        self.truth.clone().unwrap_or_else(|| TruthParams::example(self.design.n_periods))
    }
}

/// `a.b.c=value`, where `value` is parsed as a TOML value and falls back to a string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), Failure> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Failure::config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Failure::config(format!("override {key:?}: {part} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
