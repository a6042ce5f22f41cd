//! Quality report assembly and rendering.
//!
//! Every number in a rendered report comes from a field of [`QualityReport`];
//! values are stored at full precision and rounded only while rendering.

use std::fmt::Write as _;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{normalize, CrossPerformanceMatrix, GcvMatrix, MatrixError};
use crate::metrics::{score, MetricsError, QualityScores};

/// Decimals for GCV ratios and the two scores.
pub const RATIO_DECIMALS: usize = 2;
/// Decimals for raw metric values.
pub const METRIC_DECIMALS: usize = 3;
/// Decimals for intermediate weights.
pub const WEIGHT_DECIMALS: usize = 3;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    #[default]
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            other => Err(format!(
                "unknown format '{other}' (expected json, markdown or csv)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub synthetic_id: String,
    pub reference_ids: Vec<String>,
    pub metric_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Where the matrix came from: a matrix file or an experiment cache.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Completion time of the earliest and latest cell, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells_completed: Option<(DateTime<Utc>, DateTime<Utc>)>,
    pub generated_at: DateTime<Utc>,
    /// SHA-256 of the raw matrix.
    pub matrix_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub metadata: ReportMetadata,
    pub matrix: CrossPerformanceMatrix,
    pub gcv: GcvMatrix,
    pub scores: QualityScores,
    pub warnings: Vec<String>,
}

/// Optional context the caller knows about but the matrix does not.
#[derive(Debug, Clone, Default)]
pub struct ReportContext {
    pub seed: Option<u64>,
    pub source: Option<String>,
    pub cells_completed: Option<(DateTime<Utc>, DateTime<Utc>)>,
    /// Extra warnings, e.g. images dropped at prep or cache reuse.
    pub warnings: Vec<String>,
}

impl QualityReport {
    /// Normalizes and scores `matrix`.
    pub fn build(
        matrix: CrossPerformanceMatrix,
        context: ReportContext,
    ) -> Result<Self, ReportError> {
        let gcv = normalize(&matrix)?;
        let scores = score(&gcv)?;
        let ids = matrix.dataset_ids();
        let mut warnings: Vec<String> = gcv
            .above_one()
            .into_iter()
            .map(|(train, test, r)| {
                format!(
                    "R({train}, {test}) = {r:.2} > 1: the model trained on '{train}' does better on '{test}' than on its own test set"
                )
            })
            .collect();
        if let Some(reason) = &scores.s_o_unavailable {
            warnings.push(format!("S_o not computed: {reason}"));
        }
        warnings.extend(context.warnings);
        Ok(Self {
            metadata: ReportMetadata {
                synthetic_id: ids[0].clone(),
                reference_ids: ids[1..].to_vec(),
                metric_name: matrix.metric_name().to_string(),
                seed: context.seed,
                source: context.source,
                cells_completed: context.cells_completed,
                generated_at: Utc::now(),
                matrix_fingerprint: matrix.fingerprint(),
            },
            matrix,
            gcv,
            scores,
            warnings,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.to_json() + "\n",
            ReportFormat::Markdown => self.to_markdown(),
            ReportFormat::Csv => self.to_csv(),
        }
    }

    /// Only the two scores.
    pub fn terse(&self) -> String {
        format!(
            "A_o = {}\nS_o = {}\n",
            render_score(Some(self.scores.a_o)),
            self.render_s_o()
        )
    }

    fn render_s_o(&self) -> String {
        match (self.scores.s_o, &self.scores.s_o_unavailable) {
            (Some(s), _) => render_score(Some(s)),
            (None, Some(reason)) => format!("n/a ({reason})"),
            (None, None) => "n/a".into(),
        }
    }

    pub fn to_markdown(&self) -> String {
        let ids = self.matrix.dataset_ids();
        let refs = &self.metadata.reference_ids;
        let mut out = String::new();
        let _ = writeln!(out, "# Synthetic dataset quality report\n");
        let _ = writeln!(out, "- synthetic dataset: `{}`", self.metadata.synthetic_id);
        let _ = writeln!(out, "- references: {}", code_list(refs));
        let _ = writeln!(out, "- metric: `{}`", self.metadata.metric_name);
        if let Some(seed) = self.metadata.seed {
            let _ = writeln!(out, "- seed: {seed}");
        }
        if let Some(source) = &self.metadata.source {
            let _ = writeln!(out, "- source: `{source}`");
        }
        if let Some((first, last)) = &self.metadata.cells_completed {
            let _ = writeln!(
                out,
                "- cells completed: {} to {}",
                first.to_rfc3339(),
                last.to_rfc3339()
            );
        }
        let _ = writeln!(
            out,
            "- generated: {}",
            self.metadata.generated_at.to_rfc3339()
        );

        let _ = writeln!(out, "\n## Scores\n");
        let _ = writeln!(out, "| score | value |\n|---|---|");
        let _ = writeln!(
            out,
            "| A_o (simulation quality) | {} |",
            render_score(Some(self.scores.a_o))
        );
        let _ = writeln!(out, "| S_o (transfer quality) | {} |", self.render_s_o());

        let _ = writeln!(
            out,
            "\n## Cross-performance matrix `{}`\n\nRows are training sets, columns are test sets.\n",
            self.metadata.metric_name
        );
        grid_table(&mut out, ids, self.matrix.rows(), METRIC_DECIMALS);
        let _ = writeln!(out, "\n## Generalized cross-validation matrix\n");
        grid_table(&mut out, ids, self.gcv.rows(), RATIO_DECIMALS);

        let sim = &self.scores.simulation;
        let _ = writeln!(out, "\n## Simulation weights\n");
        let _ = writeln!(out, "| reference | R_oi | R_io | w_i |\n|---|---|---|---|");
        for (k, id) in refs.iter().enumerate() {
            let _ = writeln!(
                out,
                "| {id} | {:.r$} | {:.r$} | {:.w$} |",
                self.scores.forward_ratios[k],
                sim.reverse_ratios[k],
                sim.weights[k],
                r = RATIO_DECIMALS,
                w = WEIGHT_DECIMALS
            );
        }

        let _ = writeln!(out, "\n## Transfer weights\n");
        match &self.scores.transfer {
            Some(t) => {
                let _ = writeln!(
                    out,
                    "Dominance C_ij among references (row i over column j):\n"
                );
                let rows: Vec<Vec<Option<f64>>> = t.dominance.clone();
                let _ = writeln!(out, "| | {} |", refs.join(" | "));
                let _ = writeln!(out, "|---|{}", "---|".repeat(refs.len()));
                for (i, id) in refs.iter().enumerate() {
                    let cells: Vec<String> = rows[i]
                        .iter()
                        .map(|c| c.map_or("-".into(), |v| format!("{v:.WEIGHT_DECIMALS$}")))
                        .collect();
                    let _ = writeln!(out, "| **{id}** | {} |", cells.join(" | "));
                }
                let _ = writeln!(out, "\n| reference | v_i | v̂_i |\n|---|---|---|");
                for (k, id) in refs.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "| {id} | {:.w$} | {:.w$} |",
                        t.raw[k],
                        t.normalized[k],
                        w = WEIGHT_DECIMALS
                    );
                }
                let _ = writeln!(out, "\nS_o uses {}.", self.scores.v_normalization);
            }
            None => {
                let _ = writeln!(out, "{}", self.render_s_o());
            }
        }

        if !self.warnings.is_empty() {
            let _ = writeln!(out, "\n## Warnings\n");
            for w in &self.warnings {
                let _ = writeln!(out, "- {w}");
            }
        }
        out
    }

    /// Long-form CSV: `section,row,column,value` at full precision.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut put = |section: &str, row: &str, col: &str, value: String| {
            w.write_record([section, row, col, value.as_str()])
                .expect("in-memory csv");
        };
        put("section", "row", "column", "value".into());
        let ids = self.matrix.dataset_ids();
        for (i, row) in self.matrix.rows().iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                put(self.matrix.metric_name(), &ids[i], &ids[j], v.to_string());
            }
        }
        for (i, row) in self.gcv.rows().iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                put("gcv", &ids[i], &ids[j], v.to_string());
            }
        }
        let refs = &self.metadata.reference_ids;
        let synthetic = &self.metadata.synthetic_id;
        for (k, id) in refs.iter().enumerate() {
            put(
                "w",
                id,
                synthetic,
                self.scores.simulation.weights[k].to_string(),
            );
        }
        if let Some(t) = &self.scores.transfer {
            for (i, a) in refs.iter().enumerate() {
                for (j, b) in refs.iter().enumerate() {
                    if let Some(c) = t.dominance[i][j] {
                        put("c", a, b, c.to_string());
                    }
                }
            }
            for (k, id) in refs.iter().enumerate() {
                put("v", id, "", t.raw[k].to_string());
                put("v_normalized", id, "", t.normalized[k].to_string());
            }
        }
        put("score", "a_o", "", self.scores.a_o.to_string());
        put(
            "score",
            "s_o",
            "",
            self.scores
                .s_o
                .map_or_else(|| "n/a".to_string(), |s| s.to_string()),
        );
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 input")
    }
}

fn render_score(value: Option<f64>) -> String {
    value.map_or("n/a".into(), |v| format!("{v:.RATIO_DECIMALS$}"))
}

fn code_list(ids: &[String]) -> String {
    ids.iter()
        .map(|i| format!("`{i}`"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn grid_table(out: &mut String, ids: &[String], rows: &[Vec<f64>], decimals: usize) {
    let _ = writeln!(out, "| train \\ test | {} |", ids.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(ids.len()));
    for (id, row) in ids.iter().zip(rows) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.decimals$}")).collect();
        let _ = writeln!(out, "| **{id}** | {} |", cells.join(" | "));
    }
}

/// Parses a rendered 2-decimal GCV table back into numbers, row-major.
/// Used by tests and by anyone diffing reports.
pub fn markdown_grid_values(table: &str) -> Vec<Vec<f64>> {
    table
        .lines()
        .filter(|l| l.starts_with("| **"))
        .map(|l| {
            l.trim_matches('|')
                .split('|')
                .skip(1)
                .map(|c| c.trim().parse().expect("numeric cell"))
                .collect()
        })
        .collect()
}
