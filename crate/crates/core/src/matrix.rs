//! Cross-performance matrix and its row-normalized generalized
//! cross-validation (GCV) form.
//!
//! Rows index the training dataset, columns the test dataset. Index 0 is
//! always the synthetic dataset under test; indices `1..=N` are the
//! references in declaration order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MatrixError {
    #[error("missing cell: model trained on '{train}' evaluated on '{test}'")]
    MissingCell { train: String, test: String },
    #[error("duplicate cell: model trained on '{train}' evaluated on '{test}'")]
    DuplicateCell { train: String, test: String },
    #[error("cells use more than one metric: {}", .0.join(", "))]
    MixedMetrics(Vec<String>),
    #[error("cell refers to unknown dataset '{0}'")]
    UnknownDataset(String),
    #[error("duplicate dataset id '{0}'")]
    DuplicateDataset(String),
    #[error("matrix shape: {0}")]
    Shape(String),
    #[error(
        "invalid metric value {value} for ('{train}', '{test}'): must be finite and non-negative"
    )]
    InvalidValue {
        train: String,
        test: String,
        value: f64,
    },
    #[error(
        "model trained on '{0}' scored zero on its own test set; its row cannot be normalized"
    )]
    ZeroDiagonal(String),
    #[error("matrix csv: {0}")]
    Csv(String),
}

pub type Result<T, E = MatrixError> = std::result::Result<T, E>;

/// One measured value of the task metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub metric_name: String,
}

impl MetricValue {
    /// `None` unless `value` is finite and non-negative.
    pub fn new(value: f64, metric_name: impl Into<String>) -> Option<Self> {
        (value.is_finite() && value >= 0.0).then(|| Self {
            value,
            metric_name: metric_name.into(),
        })
    }
}

/// Raw metric grid, `(N+1) x (N+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct CrossPerformanceMatrix {
    metric_name: String,
    dataset_ids: Vec<String>,
    cells: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    metric_name: String,
    dataset_ids: Vec<String>,
    cells: Vec<Vec<f64>>,
}

impl TryFrom<RawMatrix> for CrossPerformanceMatrix {
    type Error = MatrixError;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Self::new(raw.metric_name, raw.dataset_ids, raw.cells)
    }
}

impl From<CrossPerformanceMatrix> for RawMatrix {
    fn from(m: CrossPerformanceMatrix) -> Self {
        Self {
            metric_name: m.metric_name,
            dataset_ids: m.dataset_ids,
            cells: m.cells,
        }
    }
}

fn check_ids(ids: &[String]) -> Result<()> {
    if ids.len() < 2 {
        return Err(MatrixError::Shape(format!(
            "need the synthetic dataset and at least one reference, got {} id(s)",
            ids.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(MatrixError::DuplicateDataset(id.clone()));
        }
    }
    Ok(())
}

impl CrossPerformanceMatrix {
    /// Validates shape and values; `cells` is row-major.
    pub fn new(
        metric_name: impl Into<String>,
        dataset_ids: Vec<String>,
        cells: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_ids(&dataset_ids)?;
        let side = dataset_ids.len();
        if cells.len() != side || cells.iter().any(|row| row.len() != side) {
            return Err(MatrixError::Shape(format!(
                "expected {side} rows of {side} cells for {side} datasets"
            )));
        }
        for (i, row) in cells.iter().enumerate() {
            for (j, &value) in row.iter().enumerate() {
                if !(value.is_finite() && value >= 0.0) {
                    return Err(MatrixError::InvalidValue {
                        train: dataset_ids[i].clone(),
                        test: dataset_ids[j].clone(),
                        value,
                    });
                }
            }
        }
        Ok(Self {
            metric_name: metric_name.into(),
            dataset_ids,
            cells,
        })
    }

    pub fn metric_name(&self) -> &str {
        &self.metric_name
    }

    pub fn dataset_ids(&self) -> &[String] {
        &self.dataset_ids
    }

    pub fn side(&self) -> usize {
        self.dataset_ids.len()
    }

    /// Number of reference datasets N.
    pub fn references(&self) -> usize {
        self.side() - 1
    }

    pub fn get(&self, train: usize, test: usize) -> f64 {
        self.cells[train][test]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.cells
    }

    /// Copy with row `train` multiplied by `factor`.
    pub fn scale_row(&self, train: usize, factor: f64) -> Result<Self> {
        let mut cells = self.cells.clone();
        for v in &mut cells[train] {
            *v *= factor;
        }
        Self::new(self.metric_name.clone(), self.dataset_ids.clone(), cells)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix always serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// SHA-256 over the compact JSON encoding.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("matrix always serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// CSV with the metric name in the corner cell, test ids across the
    /// header and train ids down the first column. Values use the shortest
    /// decimal form that parses back to the same `f64`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&csv_field(&self.metric_name));
        for id in &self.dataset_ids {
            out.push(',');
            out.push_str(&csv_field(id));
        }
        out.push('\n');
        for (id, row) in self.dataset_ids.iter().zip(&self.cells) {
            out.push_str(&csv_field(id));
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| MatrixError::Csv(e.to_string()))?;
            rows.push(record.iter().map(str::to_string).collect::<Vec<_>>());
        }
        let (header, body) = rows
            .split_first()
            .ok_or_else(|| MatrixError::Csv("empty document".into()))?;
        let metric_name = header[0].clone();
        let ids: Vec<String> = header[1..].to_vec();
        let mut cells = Vec::with_capacity(body.len());
        for (i, row) in body.iter().enumerate() {
            let expected = ids.get(i).map(String::as_str).unwrap_or("<none>");
            if row[0] != expected {
                return Err(MatrixError::Csv(format!(
                    "row {} is labelled '{}' but column {} is '{}'",
                    i + 1,
                    row[0],
                    i + 1,
                    expected
                )));
            }
            let values = row[1..]
                .iter()
                .map(|field| {
                    field
                        .parse::<f64>()
                        .map_err(|_| MatrixError::Csv(format!("'{field}' is not a number")))
                })
                .collect::<Result<Vec<_>>>()?;
            cells.push(values);
        }
        Self::new(metric_name, ids, cells)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Assembles the matrix from one result per ordered (train, test) pair.
/// `dataset_ids[0]` must be the synthetic dataset.
pub fn build_matrix<I>(results: I, dataset_ids: &[String]) -> Result<CrossPerformanceMatrix>
where
    I: IntoIterator<Item = (String, String, MetricValue)>,
{
    check_ids(dataset_ids)?;
    let index: BTreeMap<&str, usize> = dataset_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let side = dataset_ids.len();
    let mut grid: Vec<Vec<Option<f64>>> = vec![vec![None; side]; side];
    let mut metrics = BTreeSet::new();

    for (train, test, metric) in results {
        let i = *index
            .get(train.as_str())
            .ok_or_else(|| MatrixError::UnknownDataset(train.clone()))?;
        let j = *index
            .get(test.as_str())
            .ok_or_else(|| MatrixError::UnknownDataset(test.clone()))?;
        if grid[i][j].is_some() {
            return Err(MatrixError::DuplicateCell { train, test });
        }
        if !(metric.value.is_finite() && metric.value >= 0.0) {
            return Err(MatrixError::InvalidValue {
                train,
                test,
                value: metric.value,
            });
        }
        grid[i][j] = Some(metric.value);
        metrics.insert(metric.metric_name);
    }
    if metrics.len() > 1 {
        return Err(MatrixError::MixedMetrics(metrics.into_iter().collect()));
    }

    let mut cells = Vec::with_capacity(side);
    for (i, row) in grid.into_iter().enumerate() {
        let mut values = Vec::with_capacity(side);
        for (j, cell) in row.into_iter().enumerate() {
            values.push(cell.ok_or_else(|| MatrixError::MissingCell {
                train: dataset_ids[i].clone(),
                test: dataset_ids[j].clone(),
            })?);
        }
        cells.push(values);
    }
    let metric_name = metrics.into_iter().next().unwrap_or_default();
    CrossPerformanceMatrix::new(metric_name, dataset_ids.to_vec(), cells)
}

/// Row-normalized transfer ratios, `ratios[i][j] = P[i][j] / P[i][i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGcv")]
pub struct GcvMatrix {
    dataset_ids: Vec<String>,
    ratios: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawGcv {
    dataset_ids: Vec<String>,
    ratios: Vec<Vec<f64>>,
}

impl TryFrom<RawGcv> for GcvMatrix {
    type Error = MatrixError;

    fn try_from(raw: RawGcv) -> Result<Self> {
        Self::from_ratios(raw.dataset_ids, raw.ratios)
    }
}

/// Divides every row by its diagonal entry.
pub fn normalize(matrix: &CrossPerformanceMatrix) -> Result<GcvMatrix> {
    let ratios = matrix
        .cells
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let own = row[i];
            if own <= 0.0 {
                return Err(MatrixError::ZeroDiagonal(matrix.dataset_ids[i].clone()));
            }
            Ok(row
                .iter()
                .enumerate()
                .map(|(j, &v)| if i == j { 1.0 } else { v / own })
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(GcvMatrix {
        dataset_ids: matrix.dataset_ids.clone(),
        ratios,
    })
}

impl GcvMatrix {
    /// Builds a GCV matrix from ratios directly, e.g. a published table.
    /// Diagonal entries must be exactly 1.
    pub fn from_ratios(dataset_ids: Vec<String>, ratios: Vec<Vec<f64>>) -> Result<Self> {
        let side = dataset_ids.len();
        let m = CrossPerformanceMatrix::new("ratio", dataset_ids, ratios)?;
        for i in 0..side {
            if m.cells[i][i] != 1.0 {
                return Err(MatrixError::Shape(format!(
                    "diagonal entry for '{}' is {}, expected 1",
                    m.dataset_ids[i], m.cells[i][i]
                )));
            }
        }
        Ok(Self {
            dataset_ids: m.dataset_ids,
            ratios: m.cells,
        })
    }

    pub fn dataset_ids(&self) -> &[String] {
        &self.dataset_ids
    }

    pub fn side(&self) -> usize {
        self.dataset_ids.len()
    }

    /// Number of reference datasets N.
    pub fn references(&self) -> usize {
        self.side() - 1
    }

    /// `R[train][test]`.
    pub fn ratio(&self, train: usize, test: usize) -> f64 {
        self.ratios[train][test]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.ratios
    }

    /// R_oi for references i = 1..=N.
    pub fn forward(&self) -> Vec<f64> {
        self.ratios[0][1..].to_vec()
    }

    /// R_io for references i = 1..=N.
    pub fn reverse(&self) -> Vec<f64> {
        self.ratios[1..].iter().map(|row| row[0]).collect()
    }

    /// Off-diagonal cells whose ratio exceeds 1, as (train, test, ratio).
    pub fn above_one(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for (i, row) in self.ratios.iter().enumerate() {
            for (j, &r) in row.iter().enumerate() {
                if i != j && r > 1.0 {
                    out.push((self.dataset_ids[i].clone(), self.dataset_ids[j].clone(), r));
                }
            }
        }
        out
    }

    /// Reorders datasets; `order[k]` is the old index placed at `k`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            dataset_ids: order.iter().map(|&i| self.dataset_ids[i].clone()).collect(),
            ratios: order
                .iter()
                .map(|&i| order.iter().map(|&j| self.ratios[i][j]).collect())
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix always serializes")
    }
}

impl fmt::Display for GcvMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.ratios {
            let cells: Vec<String> = row.iter().map(|r| format!("{r:.2}")).collect();
            writeln!(f, "{}", cells.join("  "))?;
        }
        Ok(())
    }
}
