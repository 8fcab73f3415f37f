//! Class-incremental evaluation bookkeeping: the lower-triangular accuracy
//! matrix and its stage/overall averages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row `t` holds the accuracy on each task `i <= t` measured after learning
/// task `t` (both zero-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsLedger {
    pub matrix: Vec<Vec<f64>>,
}

impl MetricsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record the accuracies measured after finishing the next task.
    pub fn record_stage(&mut self, accuracies: Vec<f64>) -> Result<()> {
        if accuracies.len() != self.matrix.len() + 1 {
            return Err(Error::Metrics(format!(
                "stage {} needs {} accuracies, got {}",
                self.matrix.len(),
                self.matrix.len() + 1,
                accuracies.len()
            )));
        }
        if accuracies.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Metrics("accuracy outside [0, 1]".into()));
        }
        self.matrix.push(accuracies);
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.matrix.len()
    }
}

/// A_t for every stage plus the overall average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    /// A_t = mean over i <= t of a_{i,t}.
    pub per_stage: Vec<f64>,
    /// Mean of the per-stage values.
    pub average: f64,
}

/// Exact stage means and their overall mean from a complete lower-triangular
/// accuracy matrix.
pub fn compute_metrics(matrix: &[Vec<f64>]) -> Result<MetricsSummary> {
    if matrix.is_empty() {
        return Err(Error::Metrics("accuracy matrix is empty".into()));
    }
    for (t, row) in matrix.iter().enumerate() {
        if row.len() != t + 1 {
            return Err(Error::Metrics(format!(
                "row {t} has {} entries, expected {}",
                row.len(),
                t + 1
            )));
        }
        if row.iter().any(|a| !a.is_finite()) {
            return Err(Error::Metrics(format!("row {t} holds a non-finite entry")));
        }
    }
    let per_stage: Vec<f64> = matrix
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    let average = per_stage.iter().sum::<f64>() / per_stage.len() as f64;
    Ok(MetricsSummary { per_stage, average })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_entry_matrix() {
        let summary = compute_metrics(&[vec![0.8]]).unwrap();
        assert_eq!(summary.per_stage, vec![0.8]);
        assert_eq!(summary.average, 0.8);
    }

    #[test]
    fn two_stage_example() {
        let summary = compute_metrics(&[vec![1.0], vec![0.5, 0.7]]).unwrap();
        assert!((summary.per_stage[1] - 0.6).abs() < 1e-12);
        assert!((summary.average - 0.8).abs() < 1e-12);
    }

    #[test]
    fn random_matrices_match_mean_of_means_oracle() {
        use crate::rng::{stream, uniform_f64};
        let mut rng = stream(3, &[]);
        for _ in 0..50 {
            let t = 1 + (uniform_f64(&mut rng, 0.0, 8.0) as usize);
            let matrix: Vec<Vec<f64>> = (0..t)
                .map(|row| (0..=row).map(|_| uniform_f64(&mut rng, 0.0, 1.0)).collect())
                .collect();
            let summary = compute_metrics(&matrix).unwrap();
            // brute-force oracle
            let mut stage_means = Vec::new();
            for row in &matrix {
                let mut s = 0.0;
                for &v in row {
                    s += v;
                }
                stage_means.push(s / row.len() as f64);
            }
            let mut overall = 0.0;
            for &m in &stage_means {
                overall += m;
            }
            overall /= stage_means.len() as f64;
            assert_eq!(summary.per_stage, stage_means);
            assert_eq!(summary.average, overall);
        }
    }

    #[test]
    fn missing_entries_are_metrics_errors() {
        assert!(matches!(
            compute_metrics(&[vec![0.5], vec![0.5]]),
            Err(Error::Metrics(_))
        ));
        assert!(matches!(compute_metrics(&[]), Err(Error::Metrics(_))));
    }

    #[test]
    fn ledger_enforces_triangular_growth() {
        let mut ledger = MetricsLedger::new();
        ledger.record_stage(vec![0.9]).unwrap();
        assert!(ledger.record_stage(vec![0.9]).is_err());
        ledger.record_stage(vec![0.8, 0.7]).unwrap();
        assert!(ledger.record_stage(vec![1.5, 0.0, 0.0]).is_err());
        assert_eq!(ledger.stages(), 2);
    }
}
