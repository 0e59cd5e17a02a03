//! Structural checks for closed-cohort stepped-wedge data.

use std::collections::BTreeSet;
use std::fmt;

use super::TrialDataset;

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// A cluster switches back from treatment to control.
    NonStaggeredRollout { cluster: String, period: usize },
    /// A cluster is treated at the all-control baseline period.
    TreatedAtBaseline { cluster: String },
    /// No record of the cluster carries this period.
    MissingClusterPeriod { cluster: String, period: usize },
    /// Records of one cluster-period disagree on `Z`.
    InconsistentTreatment { cluster: String, period: usize },
    /// Exactly one of `M`, `Y` is missing.
    PartialMissingness { cluster: String, individual: String, period: usize },
    /// An individual is observed again after a missing period.
    NonMonotoneDropout { cluster: String, individual: String, period: usize },
    /// An individual has no record at some period (cohort not closed).
    OpenCohort { cluster: String, individual: String, period: usize },
    DuplicateRecord { cluster: String, individual: String, period: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonStaggeredRollout { cluster, period } => {
                write!(f, "cluster {cluster}: treatment switches off at period {period}")
            }
            Self::TreatedAtBaseline { cluster } => write!(f, "cluster {cluster}: treated at period 1"),
            Self::MissingClusterPeriod { cluster, period } => write!(f, "cluster {cluster}: no records at period {period}"),
            Self::InconsistentTreatment { cluster, period } => {
                write!(f, "cluster {cluster}: conflicting treatment values at period {period}")
            }
            Self::PartialMissingness { cluster, individual, period } => write!(
                f,
                "cluster {cluster}, individual {individual}, period {period}: mediator and outcome must be missing together"
            ),
            Self::NonMonotoneDropout { cluster, individual, period } => write!(
                f,
                "cluster {cluster}, individual {individual}: observed again at period {period} after dropout"
            ),
            Self::OpenCohort { cluster, individual, period } => {
                write!(f, "cluster {cluster}, individual {individual}: no record at period {period}")
            }
            Self::DuplicateRecord { cluster, individual, period } => {
                write!(f, "cluster {cluster}, individual {individual}: duplicate record at period {period}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

/// Check rollout, cohort closure and the missingness pattern.
///
/// Every individual must carry a record at every period (missing values are
/// encoded as empty cells), so dropout is visible as a suffix of missing cells.
pub fn validate(data: &TrialDataset) -> ValidationReport {
    let mut violations = Vec::new();
    let t_max = data.n_periods();

    let mut conflicts = BTreeSet::new();
    for (k, r) in data.records().iter().enumerate() {
        let (c, _) = data.record_index(k);
        if data.treatment(c, r.period) != Some(r.treatment) {
            conflicts.insert((c, r.period));
        }
    }
    for &(c, period) in &conflicts {
        violations.push(Violation::InconsistentTreatment { cluster: data.clusters()[c].id.clone(), period });
    }

    for cluster in data.clusters() {
        let mut was_treated = false;
        for (t0, z) in cluster.treatment.iter().enumerate() {
            let period = t0 + 1;
            match z {
                None => violations.push(Violation::MissingClusterPeriod { cluster: cluster.id.clone(), period }),
                Some(true) => {
                    if period == 1 {
                        violations.push(Violation::TreatedAtBaseline { cluster: cluster.id.clone() });
                    }
                    was_treated = true;
                }
                Some(false) => {
                    if was_treated {
                        violations.push(Violation::NonStaggeredRollout { cluster: cluster.id.clone(), period });
                    }
                }
            }
        }
    }

    // Per-individual period table: None = no record, Some(observed).
    let mut seen: Vec<Vec<Option<bool>>> = vec![vec![None; t_max]; data.n_individuals()];
    for (k, r) in data.records().iter().enumerate() {
        let (c, i) = data.record_index(k);
        let ids = || (data.clusters()[c].id.clone(), r.individual_id.clone());
        if r.mediator.is_some() != r.outcome.is_some() {
            let (cluster, individual) = ids();
            violations.push(Violation::PartialMissingness { cluster, individual, period: r.period });
        }
        let slot = &mut seen[i][r.period - 1];
        if slot.is_some() {
            let (cluster, individual) = ids();
            violations.push(Violation::DuplicateRecord { cluster, individual, period: r.period });
        }
        // A half-missing row is reported above; treat it as present here.
        *slot = Some(r.mediator.is_some() || r.outcome.is_some());
    }
    for (i, periods) in seen.iter().enumerate() {
        let c = data.cluster_of(i);
        let ids = || (data.clusters()[c].id.clone(), data.individual_id(i).to_string());
        let mut dropped = false;
        for (t0, cell) in periods.iter().enumerate() {
            match cell {
                None => {
                    let (cluster, individual) = ids();
                    violations.push(Violation::OpenCohort { cluster, individual, period: t0 + 1 });
                }
                Some(false) => dropped = true,
                Some(true) if dropped => {
                    let (cluster, individual) = ids();
                    violations.push(Violation::NonMonotoneDropout { cluster, individual, period: t0 + 1 });
                    dropped = false;
                }
                Some(true) => {}
            }
        }
    }

    ValidationReport { violations }
}
