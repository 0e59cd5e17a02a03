//! Long-format stepped-wedge trial data.
//!
//! A [`TrialDataset`] holds one [`ObservationRecord`] per (individual,
//! cluster, period). Clusters, individuals and periods are indexed densely at
//! construction; the structural invariants of a closed-cohort stepped-wedge
//! design are checked by [`validate`].

mod io;
mod validate;

use std::collections::BTreeMap;

use thiserror::Error;

pub use io::{content_sha256, load_csv, read_csv, write_csv, CSV_HEADER};
pub use validate::{validate, ValidationReport, Violation};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset failed validation:\n{0}")]
    Invalid(ValidationReport),
    #[error("dataset is empty")]
    Empty,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One row of the long-format trial table.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub cluster_id: String,
    pub individual_id: String,
    /// 1-based period; period 1 is the all-control baseline.
    pub period: usize,
    pub treatment: bool,
    pub mediator: Option<f64>,
    pub outcome: Option<bool>,
}

impl ObservationRecord {
    /// Both the mediator and the outcome are present.
    pub fn is_observed(&self) -> bool {
        self.mediator.is_some() && self.outcome.is_some()
    }
}

/// Per-cluster summary derived from the records.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterInfo {
    pub id: String,
    /// Number of distinct individuals (`N_j`).
    pub cohort_size: usize,
    /// `Z_jt` for t = 1..T; `None` when no record of the cluster carries period t.
    pub treatment: Vec<Option<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    records: Vec<ObservationRecord>,
    n_periods: usize,
    clusters: Vec<ClusterInfo>,
    /// Dense cluster index per record.
    cluster_index: Vec<usize>,
    /// Dense global individual index per record.
    individual_index: Vec<usize>,
    /// Cluster of each global individual.
    individual_cluster: Vec<usize>,
    individual_ids: Vec<String>,
}

impl TrialDataset {
    /// Index the records. Structural problems are reported by [`validate`],
    /// not here; only an empty table is rejected.
    pub fn from_records(records: Vec<ObservationRecord>) -> Result<Self, DataError> {
        if records.is_empty() {
            return Err(DataError::Empty);
        }
        let n_periods = records.iter().map(|r| r.period).max().unwrap_or(0);
        let mut cluster_lookup: BTreeMap<&str, usize> = BTreeMap::new();
        let mut cluster_order: Vec<&str> = Vec::new();
        for r in &records {
            if !cluster_lookup.contains_key(r.cluster_id.as_str()) {
                cluster_lookup.insert(&r.cluster_id, cluster_order.len());
                cluster_order.push(&r.cluster_id);
            }
        }
        let mut indiv_lookup: BTreeMap<(usize, &str), usize> = BTreeMap::new();
        let mut individual_cluster = Vec::new();
        let mut individual_ids = Vec::new();
        let mut cluster_index = Vec::with_capacity(records.len());
        let mut individual_index = Vec::with_capacity(records.len());
        let mut cohort = vec![0usize; cluster_order.len()];
        let mut treatment: Vec<Vec<Option<bool>>> = vec![vec![None; n_periods]; cluster_order.len()];
        for r in &records {
            let c = cluster_lookup[r.cluster_id.as_str()];
            let key = (c, r.individual_id.as_str());
            let i = match indiv_lookup.get(&key) {
                Some(&i) => i,
                None => {
                    let i = individual_cluster.len();
                    indiv_lookup.insert(key, i);
                    individual_cluster.push(c);
                    individual_ids.push(r.individual_id.clone());
                    cohort[c] += 1;
                    i
                }
            };
            cluster_index.push(c);
            individual_index.push(i);
            if r.period >= 1 {
                // First record wins; conflicts are reported by validate.
                treatment[c][r.period - 1].get_or_insert(r.treatment);
            }
        }
        let clusters = cluster_order
            .iter()
            .zip(cohort)
            .zip(treatment)
            .map(|((id, cohort_size), treatment)| ClusterInfo { id: id.to_string(), cohort_size, treatment })
            .collect();
        Ok(Self {
            records,
            n_periods,
            clusters,
            cluster_index,
            individual_index,
            individual_cluster,
            individual_ids,
        })
    }

    pub fn records(&self) -> &[ObservationRecord] {
        &self.records
    }

    /// Number of periods `T` (the largest period present).
    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn clusters(&self) -> &[ClusterInfo] {
        &self.clusters
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_individuals(&self) -> usize {
        self.individual_cluster.len()
    }

    /// Cluster index of global individual `i`.
    pub fn cluster_of(&self, individual: usize) -> usize {
        self.individual_cluster[individual]
    }

    /// Identifier of global individual `i` (unique within its cluster).
    pub fn individual_id(&self, individual: usize) -> &str {
        &self.individual_ids[individual]
    }

    /// Dense `(cluster, individual)` indices of record `k`.
    pub fn record_index(&self, k: usize) -> (usize, usize) {
        (self.cluster_index[k], self.individual_index[k])
    }

    /// `Z_jt`, with `Z_j0 = 0` by convention.
    pub fn treatment(&self, cluster: usize, period: usize) -> Option<bool> {
        if period == 0 {
            return Some(false);
        }
        self.clusters[cluster].treatment.get(period - 1).copied().flatten()
    }

    /// `observed[i][t-1]`: whether individual `i` has `(M, Y)` at period t,
    /// with the mediator value.
    fn observation_grid(&self) -> Vec<Vec<Option<(f64, bool)>>> {
        let mut grid = vec![vec![None; self.n_periods]; self.n_individuals()];
        for (k, r) in self.records.iter().enumerate() {
            if let (Some(m), Some(y)) = (r.mediator, r.outcome) {
                if r.period >= 1 {
                    grid[self.individual_index[k]][r.period - 1] = Some((m, y));
                }
            }
        }
        grid
    }
}

/// The previous-period values joined to an observed row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagValues {
    pub treatment: bool,
    pub mediator: f64,
    pub outcome: bool,
}

/// An observed `(M_ijt, Y_ijt, Z_jt)` row with its lagged values when available.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaggedRow {
    pub cluster: usize,
    pub individual: usize,
    pub period: usize,
    pub treatment: bool,
    /// `Z_{j,t-1}`; false at t = 1.
    pub prev_treatment: bool,
    pub mediator: f64,
    pub outcome: bool,
    pub lag: Option<LagValues>,
}

/// Observed rows of a dataset, ordered by (individual, period).
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedView {
    pub rows: Vec<LaggedRow>,
    pub n_clusters: usize,
    pub n_individuals: usize,
    pub n_periods: usize,
    pub warnings: Vec<String>,
}

impl LaggedView {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Rows with observed `(M, Y)`; with `require_lag`, only rows whose previous
/// period mediator is also observed (so t ≥ 2).
///
/// Missing cells are dropped, which is the observed-data likelihood under
/// monotone missing-at-random dropout.
pub fn observed_rows(data: &TrialDataset, require_lag: bool) -> LaggedView {
    let grid = data.observation_grid();
    let mut rows = Vec::new();
    for (i, periods) in grid.iter().enumerate() {
        let c = data.cluster_of(i);
        for t in 1..=data.n_periods() {
            let Some((m, y)) = periods[t - 1] else { continue };
            let Some(z) = data.treatment(c, t) else { continue };
            let prev_treatment = data.treatment(c, t - 1).unwrap_or(false);
            let lag = if t >= 2 {
                periods[t - 2].map(|(mp, yp)| LagValues { treatment: prev_treatment, mediator: mp, outcome: yp })
            } else {
                None
            };
            if require_lag && lag.is_none() {
                continue;
            }
            rows.push(LaggedRow {
                cluster: c,
                individual: i,
                period: t,
                treatment: z,
                prev_treatment,
                mediator: m,
                outcome: y,
                lag,
            });
        }
    }
    let mut warnings = Vec::new();
    if rows.is_empty() {
        let msg = if require_lag {
            "no observed rows with an observed previous-period mediator".to_string()
        } else {
            "no observed rows".to_string()
        };
        log::warn!("{msg}");
        warnings.push(msg);
    }
    LaggedView {
        rows,
        n_clusters: data.n_clusters(),
        n_individuals: data.n_individuals(),
        n_periods: data.n_periods(),
        warnings,
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// `n_clusters` clusters with staircase starts, `n_ind` individuals, all observed.
    pub fn complete(n_clusters: usize, n_periods: usize, n_ind: usize) -> Vec<ObservationRecord> {
        let mut out = Vec::new();
        for j in 0..n_clusters {
            let start = 2 + j * (n_periods - 1) / n_clusters;
            for i in 0..n_ind {
                for t in 1..=n_periods {
                    out.push(ObservationRecord {
                        cluster_id: format!("c{}", j + 1),
                        individual_id: format!("i{}", i + 1),
                        period: t,
                        treatment: t >= start,
                        mediator: Some((j * 100 + i * 10 + t) as f64 * 0.25),
                        outcome: Some((i + t) % 2 == 0),
                    });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::complete;
    use super::*;

    #[test]
    fn indexes_clusters_and_cohorts() {
        let ds = TrialDataset::from_records(complete(2, 3, 2)).unwrap();
        assert_eq!(ds.records().len(), 12);
        assert_eq!(ds.n_clusters(), 2);
        assert_eq!(ds.n_individuals(), 4);
        assert_eq!(ds.n_periods(), 3);
        assert!(ds.clusters().iter().all(|c| c.cohort_size == 2));
        assert_eq!(ds.treatment(0, 0), Some(false));
    }

    #[test]
    fn lag_view_without_missingness_starts_at_period_two() {
        let ds = TrialDataset::from_records(complete(2, 3, 2)).unwrap();
        let view = observed_rows(&ds, true);
        assert_eq!(view.rows.len(), 8);
        assert!(view.rows.iter().all(|r| r.period >= 2 && r.lag.is_some()));
        let all = observed_rows(&ds, false);
        assert_eq!(all.rows.len(), 12);
    }

    #[test]
    fn dropout_at_three_keeps_only_period_two_lag_row() {
        let mut recs = complete(1, 4, 1);
        for r in recs.iter_mut().filter(|r| r.period >= 3) {
            r.mediator = None;
            r.outcome = None;
        }
        let ds = TrialDataset::from_records(recs).unwrap();
        let view = observed_rows(&ds, true);
        assert_eq!(view.rows.iter().map(|r| r.period).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn everyone_missing_after_baseline_gives_empty_view() {
        let mut recs = complete(2, 3, 3);
        for r in recs.iter_mut().filter(|r| r.period >= 2) {
            r.mediator = None;
            r.outcome = None;
        }
        let ds = TrialDataset::from_records(recs).unwrap();
        let view = observed_rows(&ds, true);
        assert!(view.is_empty());
        assert_eq!(view.warnings.len(), 1);
    }

    #[test]
    fn empty_table_is_rejected() {
        assert!(matches!(TrialDataset::from_records(vec![]), Err(DataError::Empty)));
    }
}
