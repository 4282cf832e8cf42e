use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attribution::{MethodId, SignMode};

/// Scores of one attribution map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub example_id: usize,
    pub method: MethodId,
    pub sign_mode: SignMode,
    pub loc: f64,
    pub hit: bool,
    /// `None` when the example was degenerate for the degradation metric.
    pub degradation: Option<f64>,
}

impl MetricRecord {
    pub fn skipped(&self) -> bool {
        self.degradation.is_none()
    }
}

/// Means of one (method, sign mode) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: MethodId,
    pub sign_mode: SignMode,
    pub loc: f64,
    pub pointing: f64,
    /// Mean over non-skipped examples (0 when every example was skipped).
    pub degradation: f64,
    pub average: f64,
    pub examples: usize,
    pub skipped: usize,
}

impl AggregateRow {
    pub fn new(method: MethodId, sign_mode: SignMode, loc: f64, pointing: f64, degradation: f64) -> Self {
        AggregateRow {
            method,
            sign_mode,
            loc,
            pointing,
            degradation,
            average: (loc + pointing + degradation) / 3.0,
            examples: 0,
            skipped: 0,
        }
    }
}

/// Per-(method, sign mode) means, in method then sign-mode order. Records are
/// summed in example-id order, so any permutation of the input gives
/// identical results.
pub fn aggregate(records: &[MetricRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(MethodId, SignMode), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.method, r.sign_mode)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, sign_mode), mut rs)| {
            rs.sort_by_key(|r| r.example_id);
            let n = rs.len() as f64;
            let loc = rs.iter().map(|r| r.loc).sum::<f64>() / n;
            let pointing = rs.iter().filter(|r| r.hit).count() as f64 / n;
            let scored: Vec<f64> = rs.iter().filter_map(|r| r.degradation).collect();
            let degradation = if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
            AggregateRow {
                examples: rs.len(),
                skipped: rs.len() - scored.len(),
                ..AggregateRow::new(method, sign_mode, loc, pointing, degradation)
            }
        })
        .collect()
}

/// For each method keeps the sign mode with the higher average (ties keep raw).
pub fn best_sign_mode(rows: &[AggregateRow]) -> Vec<AggregateRow> {
    let mut best: BTreeMap<MethodId, &AggregateRow> = BTreeMap::new();
    for row in rows {
        best.entry(row.method)
            .and_modify(|cur| {
                let better = row.average > cur.average || (row.average == cur.average && row.sign_mode < cur.sign_mode);
                if better {
                    *cur = row;
                }
            })
            .or_insert(row);
    }
    best.into_values().cloned().collect()
}
