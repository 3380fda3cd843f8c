//! Serialized audit reports: nested JSON and a flat CSV.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{DisparityNorm, MethodAudit, SliceAudit};

/// Label of the CSV row that summarizes all groups together.
pub const ALL_GROUPS: &str = "all";

pub const CSV_COLUMNS: [&str; 11] = [
    "method",
    "alpha",
    "group",
    "coverage",
    "set_size",
    "rule_in",
    "rule_out",
    "spearman_softmax",
    "spearman_entropy",
    "coverage_disparity",
    "set_size_disparity",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub toolkit_version: String,
    /// Fully resolved run configuration.
    pub config: serde_json::Value,
    pub normalization: DisparityNorm,
    /// One entry per (method, alpha), ordered by method then alpha.
    pub entries: Vec<MethodAudit>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AuditReport {
    pub fn new(config: serde_json::Value, normalization: DisparityNorm, mut entries: Vec<MethodAudit>) -> Self {
        entries.sort_by(|a, b| a.method.cmp(&b.method).then(a.alpha.total_cmp(&b.alpha)));
        Self {
            toolkit_version: crate::VERSION.to_string(),
            config,
            normalization,
            entries,
        }
    }

    /// Flat rows: per entry, one row per group followed by the `all` row.
    pub fn csv_rows(&self) -> Vec<[String; 11]> {
        let mut rows = Vec::new();
        for e in &self.entries {
            let row = |group: &str, s: &SliceAudit| {
                [
                    e.method.to_string(),
                    e.alpha.to_string(),
                    group.to_string(),
                    s.coverage.to_string(),
                    s.set_size.to_string(),
                    opt(s.rule_in),
                    opt(s.rule_out),
                    opt(s.spearman_softmax),
                    opt(s.spearman_entropy),
                    opt(e.coverage_disparity),
                    opt(e.set_size_disparity),
                ]
            };
            for (g, s) in &e.groups {
                rows.push(row(g, s));
            }
            rows.push(row(ALL_GROUPS, &e.overall));
        }
        rows
    }

    /// Writes the CSV, preceded by `#` comment lines carrying version and config.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# toolkit_version: {}", self.toolkit_version)?;
        writeln!(out, "# config: {}", self.config)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for row in self.csv_rows() {
            w.write_record(&row)?;
        }
        w.flush()
    }

    /// Method-by-alpha summary in the layout of a disparity sweep table.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>6}  {:<6}  {:>8}  {:>8}  {:>12}  {:>12}",
            "alpha", "method", "coverage", "set_size", "cov_disp", "size_disp"
        );
        let mut entries: Vec<&MethodAudit> = self.entries.iter().collect();
        entries.sort_by(|a, b| a.alpha.total_cmp(&b.alpha).then(a.method.cmp(&b.method)));
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        for e in entries {
            let _ = writeln!(
                s,
                "{:>6}  {:<6}  {:>8.4}  {:>8.3}  {:>12}  {:>12}",
                e.alpha,
                e.method.as_str(),
                e.overall.coverage,
                e.overall.set_size,
                cell(e.coverage_disparity),
                cell(e.set_size_disparity),
            );
        }
        s
    }
}
