//! Comparison tables and figure data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_file, HarnessError, Metrics, IDENTITY_TOLERANCE};
use crate::domain::{Dataset, Mode};

/// Files written by [`emit_report`], in write order.
pub const REPORT_FILES: [&str; 5] = [
    "report.md",
    "report.json",
    "metrics.csv",
    "grouped_bar.csv",
    "heatmap.csv",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowSource {
    /// Numbers copied from elsewhere; nothing to recompute.
    Reference,
    /// Numbers computed from record streams, one entry per dataset.
    Computed { mode: Mode, metrics: Vec<Metrics> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub accuracies: BTreeMap<Dataset, f64>,
    pub source: RowSource,
}

impl ReportRow {
    pub fn reference(
        label: impl Into<String>,
        group: Option<String>,
        accuracies: BTreeMap<Dataset, f64>,
    ) -> Self {
        Self {
            label: label.into(),
            group,
            accuracies,
            source: RowSource::Reference,
        }
    }

    /// A row whose cells are the overall accuracies of `metrics`.
    pub fn computed(
        label: impl Into<String>,
        mode: Mode,
        metrics: Vec<Metrics>,
    ) -> Result<Self, HarnessError> {
        let mut accuracies = BTreeMap::new();
        for m in &metrics {
            if m.mode != mode {
                return Err(HarnessError::ModeMismatch {
                    expected: mode,
                    found: m.mode,
                });
            }
            if accuracies.insert(m.dataset, m.acc_overall).is_some() {
                return Err(HarnessError::Validation(format!(
                    "two metric sets for {} in one row",
                    m.dataset
                )));
            }
        }
        Ok(Self {
            label: label.into(),
            group: None,
            accuracies,
            source: RowSource::Computed { mode, metrics },
        })
    }

    /// Unweighted mean over the datasets present in the row.
    pub fn avg_score(&self) -> Option<f64> {
        if self.accuracies.is_empty() {
            return None;
        }
        Some(self.accuracies.values().sum::<f64>() / self.accuracies.len() as f64)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.label.trim().is_empty() {
            return Err(HarnessError::Validation("row with empty label".into()));
        }
        for (d, a) in &self.accuracies {
            if !(0.0..=1.0).contains(a) {
                return Err(HarnessError::Validation(format!(
                    "{}: accuracy {a} on {d} is outside [0, 1]",
                    self.label
                )));
            }
        }
        if let RowSource::Computed { metrics, .. } = &self.source {
            for m in metrics {
                let r = m.identity_residual();
                if r > IDENTITY_TOLERANCE {
                    return Err(HarnessError::Validation(format!(
                        "{} on {}: pathway accuracies do not recombine (residual {r:e})",
                        self.label, m.dataset
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A named per-dataset series plotted next to the table rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureSeries {
    pub name: String,
    pub definition: String,
    pub values: BTreeMap<Dataset, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    /// Header of the first table column, e.g. "Methods" or "Variant".
    pub label_header: String,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub series: Vec<FigureSeries>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv write");
    for r in rows {
        w.write_record(&r).expect("in-memory csv write");
    }
    w.into_inner().expect("in-memory csv flush")
}

impl ReportBundle {
    pub fn new(label_header: impl Into<String>) -> Self {
        Self {
            label_header: label_header.into(),
            rows: Vec::new(),
            series: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.rows.is_empty() {
            return Err(HarnessError::Validation("report has no rows".into()));
        }
        self.rows.iter().try_for_each(ReportRow::validate)
    }

    /// Markdown table, three decimals, "-" for missing cells. A group
    /// heading row is emitted whenever the group changes.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("| {} |", self.label_header);
        for d in Dataset::ALL {
            out.push_str(&format!(" {d} |"));
        }
        out.push_str(" Avg Score |\n|---|---|---|---|---|\n");
        let mut group: Option<&str> = None;
        for row in &self.rows {
            if let Some(g) = row.group.as_deref() {
                if group != Some(g) {
                    out.push_str(&format!("| **{g}** | | | | |\n"));
                }
            }
            group = row.group.as_deref();
            out.push_str(&format!("| {} |", row.label));
            for d in Dataset::ALL {
                out.push_str(&format!(" {} |", cell(row.accuracies.get(&d).copied())));
            }
            out.push_str(&format!(" {} |\n", cell(row.avg_score())));
        }
        out
    }

    fn metrics_csv(&self) -> Vec<u8> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let rows = self
            .rows
            .iter()
            .filter_map(|r| match &r.source {
                RowSource::Computed { metrics, .. } => Some(metrics),
                RowSource::Reference => None,
            })
            .flatten()
            .map(|m| {
                vec![
                    m.dataset.to_string(),
                    m.mode.to_string(),
                    m.n_total.to_string(),
                    m.n_direct.to_string(),
                    m.n_collab.to_string(),
                    m.acc_overall.to_string(),
                    opt(m.acc_direct),
                    opt(m.acc_collab),
                ]
            })
            .collect();
        csv_bytes(
            &[
                "dataset",
                "mode",
                "n_total",
                "n_direct",
                "n_collab",
                "acc_overall",
                "acc_direct",
                "acc_collab",
            ],
            rows,
        )
    }

    fn grouped_bar_csv(&self) -> Vec<u8> {
        let mut rows = Vec::new();
        for r in &self.rows {
            for (d, v) in &r.accuracies {
                rows.push(vec![
                    "row".into(),
                    r.label.clone(),
                    d.to_string(),
                    v.to_string(),
                ]);
            }
        }
        for s in &self.series {
            for (d, v) in &s.values {
                rows.push(vec![
                    "series".into(),
                    s.name.clone(),
                    d.to_string(),
                    v.to_string(),
                ]);
            }
        }
        csv_bytes(&["kind", "name", "dataset", "value"], rows)
    }

    fn heatmap_csv(&self) -> Vec<u8> {
        let opt = |v: Option<&f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut line = vec![r.label.clone()];
                line.extend(Dataset::ALL.iter().map(|d| opt(r.accuracies.get(d))));
                line
            })
            .collect();
        csv_bytes(&["name", "MedQA", "MedMCQA", "PubMedQA"], rows)
    }
}

/// Validates the bundle and writes every file in [`REPORT_FILES`] to
/// `out_dir`. Nothing is written when validation fails.
pub fn emit_report(bundle: &ReportBundle, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    bundle.validate()?;
    let contents: [Vec<u8>; 5] = [
        bundle.to_markdown().into_bytes(),
        serde_json::to_vec_pretty(bundle).expect("bundle serializes"),
        bundle.metrics_csv(),
        bundle.grouped_bar_csv(),
        bundle.heatmap_csv(),
    ];
    fs::create_dir_all(out_dir).map_err(|source| HarnessError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for (name, bytes) in REPORT_FILES.iter().zip(contents) {
        let path = out_dir.join(name);
        write_file(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
