//! Aggregation of trial records into mean ± std summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::experiments::{TrialRecord, TrialStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two values.
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        Some(Self { n, mean, std, median, min: sorted[0], max: sorted[n - 1] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub variant: String,
    pub point: Option<f64>,
    pub trials_ok: usize,
    pub trials_failed: usize,
    pub stats: BTreeMap<String, Stat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub off_sample_refused: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub failures: usize,
    /// Experiment-level reference values (analytic moments, loaded counts).
    pub reference: BTreeMap<String, serde_json::Value>,
}

impl Summary {
    pub fn row(&self, group: Option<&str>, variant: &str, point: Option<f64>) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.group.as_deref() == group && r.variant == variant && r.point == point)
    }
}

/// Groups records by `(group, variant, point)` in order of first appearance;
/// failed trials are counted but excluded from the statistics.
pub fn summarize(records: &[TrialRecord], reference: BTreeMap<String, serde_json::Value>) -> Summary {
    let mut rows: Vec<(SummaryRow, BTreeMap<String, Vec<f64>>)> = Vec::new();
    for r in records {
        let pos = rows
            .iter()
            .position(|(row, _)| row.group == r.group && row.variant == r.variant && row.point == r.point);
        let (row, values) = match pos {
            Some(i) => &mut rows[i],
            None => {
                rows.push((
                    SummaryRow {
                        group: r.group.clone(),
                        variant: r.variant.clone(),
                        point: r.point,
                        trials_ok: 0,
                        trials_failed: 0,
                        stats: BTreeMap::new(),
                        off_sample_refused: None,
                    },
                    BTreeMap::new(),
                ));
                rows.last_mut().unwrap()
            }
        };
        match r.status {
            TrialStatus::Failed => row.trials_failed += 1,
            TrialStatus::Ok => {
                row.trials_ok += 1;
                for (k, v) in &r.metrics {
                    values.entry(k.clone()).or_default().push(*v);
                }
                if let Some(refused) = r.off_sample_refused {
                    *row.off_sample_refused.get_or_insert(0) += usize::from(refused);
                }
            }
        }
    }
    let failures = rows.iter().map(|(r, _)| r.trials_failed).sum();
    let rows = rows
        .into_iter()
        .map(|(mut row, values)| {
            row.stats = values.into_iter().filter_map(|(k, v)| Stat::of(&v).map(|s| (k, s))).collect();
            row
        })
        .collect();
    Summary { rows, failures, reference }
}
