//! Simulation-quality (A_o) and transfer-quality (S_o) scores over a GCV
//! matrix.
//!
//! With forward ratios `R_oi` (synthetic model on reference `i`), reverse
//! ratios `R_io` (reference model on the synthetic test set) and
//! reference-to-reference ratios `R_ij`:
//!
//! ```text
//! w_i  = R_io / sum_j R_jo                 A_o = sum_i w_i  * R_oi
//! C_ij = R_ij / (R_ij + R_ji)              (i != j)
//! v_i  = 2/(N-1) * sum_{j != i} C_ij
//! v^_i = v_i / sum_k v_k   (= v_i / N)     S_o = sum_i v^_i * R_oi
//! ```
//!
//! The raw `v_i` always sum to `N` because every unordered pair contributes
//! exactly 1; the normalized weights are what enter `S_o`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::matrix::GcvMatrix;

/// Allowed drift of a weight vector's sum from 1.
const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Recorded in every score so consumers know which `v` entered `S_o`.
pub const V_NORMALIZATION: &str = "v normalized by sum";

pub const S_O_UNAVAILABLE: &str = "requires ≥ 2 references";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no reference model transfers to the synthetic test set (all R_io are 0); simulation weights are undefined")]
    DegenerateWeights,
    #[error("transfer quality needs at least 2 reference datasets, got {0}")]
    TooFewReferences(usize),
    #[error("R_ij + R_ji = 0 for references '{0}' and '{1}'; dominance is undefined")]
    UndefinedDominance(String, String),
    #[error("weights must sum to 1, got {0}")]
    WeightsNotNormalized(f64),
    #[error("expected {expected} weights, got {actual}")]
    WeightCount { expected: usize, actual: usize },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationWeights {
    /// R_io for each reference.
    pub reverse_ratios: Vec<f64>,
    /// w_i, proportional to `reverse_ratios`.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferWeights {
    /// R_ij among references, `N x N`, diagonal 1.
    pub reference_ratios: Vec<Vec<f64>>,
    /// C_ij, `N x N`; the diagonal is undefined and stored as `None`.
    pub dominance: Vec<Vec<Option<f64>>>,
    /// v_i as defined by the pairwise sum; these add up to N.
    pub raw: Vec<f64>,
    /// v^_i = v_i / sum(v); these enter S_o.
    pub normalized: Vec<f64>,
}

impl TransferWeights {
    pub fn dominance(&self, i: usize, j: usize) -> Option<f64> {
        self.dominance[i][j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub a_o: f64,
    /// `None` when fewer than two references are available.
    pub s_o: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_o_unavailable: Option<String>,
    pub references: Vec<String>,
    /// R_oi for each reference.
    pub forward_ratios: Vec<f64>,
    pub simulation: SimulationWeights,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferWeights>,
    pub v_normalization: String,
    /// SHA-256 of the scored GCV matrix.
    pub matrix_fingerprint: String,
}

fn check_weights(weights: &[f64], expected: usize) -> Result<()> {
    if weights.len() != expected {
        return Err(MetricsError::WeightCount {
            expected,
            actual: weights.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(MetricsError::WeightsNotNormalized(sum));
    }
    Ok(())
}

fn weighted_forward(g: &GcvMatrix, weights: &[f64]) -> f64 {
    g.forward().iter().zip(weights).map(|(r, w)| w * r).sum()
}

/// Weights from how well each reference model transfers to the synthetic set.
pub fn simulation_weights(g: &GcvMatrix) -> Result<SimulationWeights> {
    let reverse_ratios = g.reverse();
    let total: f64 = reverse_ratios.iter().sum();
    if total <= 0.0 {
        return Err(MetricsError::DegenerateWeights);
    }
    let weights = reverse_ratios.iter().map(|r| r / total).collect();
    Ok(SimulationWeights {
        reverse_ratios,
        weights,
    })
}

/// A_o.
pub fn simulation_quality(g: &GcvMatrix, w: &SimulationWeights) -> Result<f64> {
    check_weights(&w.weights, g.references())?;
    Ok(weighted_forward(g, &w.weights))
}

/// Pairwise dominance among references and the derived centrality weights.
pub fn transfer_weights(g: &GcvMatrix) -> Result<TransferWeights> {
    let n = g.references();
    if n < 2 {
        return Err(MetricsError::TooFewReferences(n));
    }
    let ids = g.dataset_ids();
    let reference_ratios: Vec<Vec<f64>> = (1..=n)
        .map(|i| (1..=n).map(|j| g.ratio(i, j)).collect())
        .collect();

    let mut dominance = vec![vec![None; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let forward = reference_ratios[i][j];
            let total = forward + reference_ratios[j][i];
            if total <= 0.0 {
                return Err(MetricsError::UndefinedDominance(
                    ids[i + 1].clone(),
                    ids[j + 1].clone(),
                ));
            }
            let c = forward / total;
            dominance[i][j] = Some(c);
            // The complement keeps C_ij + C_ji == 1 exact in binary64.
            dominance[j][i] = Some(1.0 - c);
        }
    }

    let scale = 2.0 / (n as f64 - 1.0);
    let raw: Vec<f64> = dominance
        .iter()
        .map(|row| scale * row.iter().flatten().sum::<f64>())
        .collect();
    let total: f64 = raw.iter().sum();
    let normalized = raw.iter().map(|v| v / total).collect();
    Ok(TransferWeights {
        reference_ratios,
        dominance,
        raw,
        normalized,
    })
}

/// S_o.
pub fn transfer_quality(g: &GcvMatrix, v: &TransferWeights) -> Result<f64> {
    check_weights(&v.normalized, g.references())?;
    Ok(weighted_forward(g, &v.normalized))
}

pub fn gcv_fingerprint(g: &GcvMatrix) -> String {
    let bytes = serde_json::to_vec(g).expect("matrix always serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Both scores with every intermediate. With a single reference, S_o is
/// reported as unavailable rather than guessed.
pub fn score(g: &GcvMatrix) -> Result<QualityScores> {
    let simulation = simulation_weights(g)?;
    let a_o = simulation_quality(g, &simulation)?;
    let (s_o, transfer, s_o_unavailable) = match transfer_weights(g) {
        Ok(v) => (Some(transfer_quality(g, &v)?), Some(v), None),
        Err(MetricsError::TooFewReferences(_)) => (None, None, Some(S_O_UNAVAILABLE.to_string())),
        Err(e) => return Err(e),
    };
    Ok(QualityScores {
        a_o,
        s_o,
        s_o_unavailable,
        references: g.dataset_ids()[1..].to_vec(),
        forward_ratios: g.forward(),
        simulation,
        transfer,
        v_normalization: V_NORMALIZATION.to_string(),
        matrix_fingerprint: gcv_fingerprint(g),
    })
}
