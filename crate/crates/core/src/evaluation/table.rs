use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::inference::Selector;
use crate::training::DistillMode;

use super::RobustnessReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub mode: String,
    pub selector: Option<String>,
    pub fraction_tuned: f64,
    pub metrics: BTreeMap<String, f64>,
}

impl AblationRow {
    pub fn from_report(label: impl Into<String>, report: &RobustnessReport) -> Self {
        AblationRow {
            label: label.into(),
            mode: report.mode.clone(),
            selector: report.selector.clone(),
            fraction_tuned: report.fraction_tuned,
            metrics: report.metrics(),
        }
    }

    fn sort_key(&self) -> (usize, usize, f64, &str) {
        let mode = DistillMode::ALL
            .iter()
            .position(|m| m.name() == self.mode)
            .unwrap_or(DistillMode::ALL.len());
        let selector = match &self.selector {
            None => 0,
            Some(s) => 1 + Selector::ALL.iter().position(|v| v.name() == s).unwrap_or(Selector::ALL.len()),
        };
        (mode, selector, self.fraction_tuned, &self.label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// Rows in a fixed order (mode, selector, fraction, label) regardless of
/// input order. Columns are the union of all metric names.
pub fn ablation_table(rows: Vec<AblationRow>) -> AblationTable {
    let mut rows = rows;
    rows.sort_by(|a, b| {
        let (ka, kb) = (a.sort_key(), b.sort_key());
        ka.0.cmp(&kb.0)
            .then(ka.1.cmp(&kb.1))
            .then(ka.2.total_cmp(&kb.2))
            .then(ka.3.cmp(kb.3))
    });
    let columns: BTreeSet<String> = rows.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
    AblationTable {
        columns: columns.into_iter().collect(),
        rows,
    }
}

impl AblationTable {
    pub fn cell(&self, row: usize, column: &str) -> Option<f64> {
        self.rows.get(row)?.metrics.get(column).copied()
    }

    /// Per-column difference `rows[b] - rows[a]`; `None` where either cell
    /// is missing.
    pub fn diff(&self, a: usize, b: usize) -> Option<BTreeMap<String, Option<f64>>> {
        let (ra, rb) = (self.rows.get(a)?, self.rows.get(b)?);
        Some(
            self.columns
                .iter()
                .map(|c| {
                    let d = match (ra.metrics.get(c), rb.metrics.get(c)) {
                        (Some(x), Some(y)) => Some(y - x),
                        _ => None,
                    };
                    (c.clone(), d)
                })
                .collect(),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Fixed-width text rendering; missing cells print as `-`.
    pub fn to_text(&self) -> String {
        let mut header = vec!["label".to_string(), "mode".into(), "selector".into(), "fraction".into()];
        header.extend(self.columns.iter().cloned());
        let mut body: Vec<Vec<String>> = Vec::new();
        for r in &self.rows {
            let mut line = vec![
                r.label.clone(),
                r.mode.clone(),
                r.selector.clone().unwrap_or_else(|| "-".into()),
                format!("{:.2}", r.fraction_tuned),
            ];
            for c in &self.columns {
                line.push(r.metrics.get(c).map_or_else(|| "-".into(), |v| format!("{v:.4}")));
            }
            body.push(line);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|i| body.iter().map(|l| l[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in std::iter::once(&header).chain(&body) {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}
