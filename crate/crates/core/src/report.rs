//! Pipeline report: a versioned JSON document plus a fixed-width table in
//! the column order Accuracy, Size, MACs, #Params, Memory Footprint,
//! Execution Time.

use serde::{Deserialize, Serialize};

use crate::annealer::AuditEntry;
use crate::conductor::{ComposedList, OptimizationConfig};
use crate::error::{Error, Result};
use crate::explorer::{RankAssignment, RoundRecord};
use crate::metrics::{format_delta, format_ratio, EnhancementRow, MetricsRecord};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `Original`, `Stage1` or `Stage2`.
    pub label: String,
    pub val_accuracy: f64,
    /// `accuracy` is measured on the test split when one was supplied.
    pub metrics: MetricsRecord,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub workers: usize,
    /// Forward passes are timed on one thread.
    pub timing_threads: usize,
    pub host: String,
}

impl Environment {
    pub fn current(workers: usize) -> Self {
        Environment {
            workers,
            timing_threads: 1,
            host: format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub config: OptimizationConfig,
    pub dataset: String,
    pub model_name: String,
    /// Bits of the returned model (layers restored to dense read 0).
    pub composed_list: ComposedList,
    pub ranks: RankAssignment,
    pub delta_not_met: bool,
    /// `delta − drop` on the validation split.
    pub margin: f64,
    pub rows: Vec<ReportRow>,
    pub enhancement: EnhancementRow,
    pub stage1_rounds: Vec<RoundRecord>,
    pub anneal_audit: Vec<AuditEntry>,
    pub anneal_fell_back: bool,
    pub environment: Environment,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Report(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Report> {
        let report: Report = serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))?;
        if report.report_version != REPORT_VERSION {
            return Err(Error::Report(format!(
                "unsupported report_version {} (expected {REPORT_VERSION})",
                report.report_version
            )));
        }
        Ok(report)
    }

    pub fn table(&self) -> String {
        render_table(&self.rows, &self.enhancement)
    }
}

pub const TABLE_COLUMNS: [&str; 7] = [
    "Model",
    "Accuracy (%)",
    "Size (MB)",
    "MACs (M)",
    "#Params (M)",
    "Memory Footprint (MB)",
    "Execution Time (ms)",
];

/// Each column is as wide as its header (the label column is 8), values
/// right-aligned, separated by `" | "`. Sizes are MiB; MACs and parameter
/// counts are millions.
pub fn render_table(rows: &[ReportRow], enh: &EnhancementRow) -> String {
    let widths: Vec<usize> = TABLE_COLUMNS
        .iter()
        .enumerate()
        .map(|(i, h)| if i == 0 { 8 } else { h.len() })
        .collect();
    let line = |cells: Vec<String>| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        padded.join(" | ")
    };
    let mut out = String::new();
    out.push_str(&line(TABLE_COLUMNS.iter().map(|s| s.to_string()).collect()));
    out.push('\n');
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&rule.join("-+-"));
    out.push('\n');
    for row in rows {
        let m = &row.metrics;
        out.push_str(&line(vec![
            row.label.clone(),
            format!("{:.2}", m.accuracy),
            format!("{:.4}", m.size_mb()),
            format!("{:.4}", m.macs as f64 / 1e6),
            format!("{:.4}", m.params as f64 / 1e6),
            format!("{:.4}", m.footprint_mb()),
            format!("{:.3}", m.execution_time_ms),
        ]));
        out.push('\n');
    }
    out.push_str(&line(vec![
        "Enh".into(),
        format_delta(enh.accuracy_delta),
        format_ratio(enh.size),
        format_ratio(enh.macs),
        format_ratio(enh.params),
        format_ratio(enh.memory_footprint),
        format_ratio(enh.execution_time),
    ]));
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::enhancement;

    fn row(label: &str, params: u64) -> ReportRow {
        ReportRow {
            label: label.into(),
            val_accuracy: 97.5,
            metrics: MetricsRecord {
                accuracy: 96.25,
                size_bytes: 4 * params,
                macs: 397_824,
                params,
                memory_footprint: 4 * params + 4 * 9_000,
                execution_time_ms: 0.5,
            },
        }
    }

    #[test]
    fn identity_table() {
        let rows = vec![row("Original", 70_980), row("Stage1", 70_980)];
        let enh = enhancement(&rows[0].metrics, &rows[1].metrics);
        let t = render_table(&rows, &enh);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(
            lines[0],
            "Model    | Accuracy (%) | Size (MB) | MACs (M) | #Params (M) | Memory Footprint (MB) | Execution Time (ms)"
        );
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
        assert_eq!(&lines[2][..8], "Original");
        assert_eq!(lines[2][8..], lines[3][8..]);
        assert!(lines[4].starts_with("Enh      |         0.00 |     1.00x |"));
    }
}
