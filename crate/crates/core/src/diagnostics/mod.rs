//! Post-hoc analyses over models, captures, Hessians and calibration sets.

mod report;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibkit::CalibrationSet;
use crate::error::{QlabError, Result};
use crate::gptq::HessianAccumulator;
use crate::nanomodel::{CaptureBuffer, NamedTensorStore, QuantizedStore};
use crate::numerics::{invert_spd, quantile_sorted, Matrix};
pub use crate::numerics::{spearman_rho, RankCorrelation};
pub use report::{
    delta_table, deterministic_timestamp, sha256_hex, write_canonical, DeltaRow, DeltaTable, DiagnosticsReport, Metric, PplCell,
    RunManifest, SCHEMA_VERSION,
};

pub const HESSIAN_DISTANCE_METRIC: &str = "normalized_frobenius";

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMse {
    pub per_tensor: BTreeMap<String, f64>,
    /// Tensor with the largest MSE overall.
    pub argmax: Option<String>,
    /// `layer{i}` → its most error-prone tensor.
    pub per_layer_argmax: BTreeMap<String, String>,
}

fn mse(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n
}

/// Per-tensor mean squared error between two stores with identical layouts.
pub fn layer_mse(original: &NamedTensorStore, quantized: &NamedTensorStore) -> Result<LayerMse> {
    let a: BTreeSet<String> = original.names().into_iter().collect();
    let b: BTreeSet<String> = quantized.names().into_iter().collect();
    if a != b {
        let diff: Vec<&String> = a.symmetric_difference(&b).collect();
        return Err(QlabError::ShapeMismatch(format!("tensor names differ: {diff:?}")));
    }
    let mut per_tensor = BTreeMap::new();
    for (name, m) in original.iter() {
        let q = quantized.get(name).expect("same names");
        if m.shape() != q.shape() {
            return Err(QlabError::ShapeMismatch(format!(
                "`{name}`: {:?} vs {:?}",
                m.shape(),
                q.shape()
            )));
        }
        per_tensor.insert(name.clone(), mse(m, q));
    }

    let mut argmax: Option<(&String, f64)> = None;
    let mut layers: BTreeMap<String, (&String, f64)> = BTreeMap::new();
    for (name, &v) in &per_tensor {
        if argmax.is_none_or(|(_, best)| v > best) {
            argmax = Some((name, v));
        }
        if let Some((layer, _)) = name.split_once('.').filter(|(l, _)| l.starts_with("layer")) {
            let slot = layers.entry(layer.to_string()).or_insert((name, v));
            if v > slot.1 {
                *slot = (name, v);
            }
        }
    }
    Ok(LayerMse {
        argmax: argmax.map(|(n, _)| n.clone()),
        per_layer_argmax: layers.into_iter().map(|(l, (n, _))| (l, n.clone())).collect(),
        per_tensor,
    })
}

/// MSE against a quantized store, compared in the original parameterization.
pub fn layer_mse_quantized(original: &NamedTensorStore, quantized: &QuantizedStore) -> Result<LayerMse> {
    layer_mse(original, &quantized.to_dense()?)
}

/// Max |activation| per input channel of one captured projection.
pub fn max_channel_activations(buf: &CaptureBuffer, projection: &str) -> Result<Vec<f64>> {
    let x = buf.matrix(projection)?;
    Ok((0..x.rows())
        .map(|c| x.row(c).iter().fold(0f64, |m, &v| m.max((v as f64).abs())))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub n: usize,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub p999: f64,
    pub max: f64,
    /// Fraction of values strictly above the reference p99 (own p99 without a reference).
    pub tail_mass: f64,
    /// `max / reference.max`; below 1 means this range is narrower than the reference.
    pub range_coverage: Option<f64>,
}

/// Distribution of |values|.
pub fn profile_values(values: &[f32], reference: Option<&ActivationProfile>) -> Result<ActivationProfile> {
    if values.is_empty() {
        return Err(QlabError::EmptyInput("activation_profile"));
    }
    let mut sorted: Vec<f64> = values.iter().map(|&v| (v as f64).abs()).collect();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(QlabError::NonFiniteInput("activation_profile"));
    }
    sorted.sort_by(f64::total_cmp);
    let q = |p| quantile_sorted(&sorted, p);
    let max = *sorted.last().expect("non-empty");
    let p99 = q(0.99);
    let threshold = reference.map_or(p99, |r| r.p99);
    let above = sorted.len() - sorted.partition_point(|&v| v <= threshold);
    let range_coverage = match reference {
        None => None,
        Some(r) if r.max > 0.0 => Some(max / r.max),
        Some(_) if max == 0.0 => Some(1.0),
        Some(_) => return Err(QlabError::NonFiniteInput("range_coverage against an all-zero reference")),
    };
    Ok(ActivationProfile {
        n: sorted.len(),
        p50: q(0.5),
        p90: q(0.9),
        p99,
        p999: q(0.999),
        max,
        tail_mass: above as f64 / sorted.len() as f64,
        range_coverage,
    })
}

/// Profile over every captured projection input in the buffer.
pub fn activation_profile(buf: &CaptureBuffer, reference: Option<&ActivationProfile>) -> Result<ActivationProfile> {
    let mut values = Vec::new();
    for name in buf.names() {
        values.extend_from_slice(buf.matrix(&name)?.data());
    }
    profile_values(&values, reference)
}

/// `‖A − B‖_F / (½(‖A‖_F + ‖B‖_F))`, 0 when both are zero.
pub fn hessian_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(QlabError::DimMismatch {
            context: "hessian_distance rows",
            expected: a.rows(),
            got: b.rows(),
        });
    }
    if a.cols() != b.cols() {
        return Err(QlabError::DimMismatch {
            context: "hessian_distance cols",
            expected: a.cols(),
            got: b.cols(),
        });
    }
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = 0.5 * (a.frobenius_norm() + b.frobenius_norm());
    Ok(if norm == 0.0 { 0.0 } else { diff / norm })
}

/// Symmetric k×k distance matrix with a zero diagonal.
pub fn pairwise_hessian_distances(hinvs: &[Matrix]) -> Result<Vec<Vec<f64>>> {
    let k = hinvs.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let dists = pairs
        .par_iter()
        .map(|&(i, j)| hessian_distance(&hinvs[i], &hinvs[j]))
        .collect::<Result<Vec<f64>>>()?;
    let mut out = vec![vec![0.0; k]; k];
    for (&(i, j), d) in pairs.iter().zip(dists) {
        out[i][j] = d;
        out[j][i] = d;
    }
    Ok(out)
}

/// `(2XXᵀ + λI)⁻¹` for captured activations `x` (dim × samples).
pub fn inverse_hessian(x: &Matrix, damping: f64) -> Result<Matrix> {
    let mut acc = HessianAccumulator::new(x.rows(), damping);
    acc.accumulate(x)?;
    invert_spd(&acc.finalize()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocabStats {
    pub unique_types: usize,
    pub mean_tokens_per_example: f64,
}

pub fn vocab_stats(set: &CalibrationSet) -> Result<VocabStats> {
    if set.examples.is_empty() {
        return Err(QlabError::EmptyInput("vocab_stats"));
    }
    Ok(VocabStats {
        unique_types: set.token_types().len(),
        mean_tokens_per_example: set.total_tokens() as f64 / set.examples.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabOverlap {
    /// `(i, j, |Tᵢ ∩ Tⱼ|)` for every pair `i < j`.
    pub pairwise: Vec<(usize, usize, usize)>,
    pub triple: Option<usize>,
}

/// Intersection sizes of two or three token-type sets.
pub fn type_overlap(sets: &[BTreeSet<u32>]) -> Result<VocabOverlap> {
    if !(2..=3).contains(&sets.len()) {
        return Err(QlabError::ShapeMismatch(format!(
            "vocab overlap takes 2 or 3 sets, got {}",
            sets.len()
        )));
    }
    let mut pairwise = Vec::new();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            pairwise.push((i, j, sets[i].intersection(&sets[j]).count()));
        }
    }
    let triple = (sets.len() == 3).then(|| {
        sets[0]
            .intersection(&sets[1])
            .filter(|t| sets[2].contains(t))
            .count()
    });
    Ok(VocabOverlap { pairwise, triple })
}

pub fn vocab_overlap(sets: &[&CalibrationSet]) -> Result<VocabOverlap> {
    if let Some(first) = sets.first() {
        if let Some(other) = sets.iter().find(|s| s.tokenizer != first.tokenizer) {
            return Err(QlabError::TokenizerMismatch(
                first.tokenizer.name().to_string(),
                other.tokenizer.name().to_string(),
            ));
        }
    }
    let types: Vec<BTreeSet<u32>> = sets.iter().map(|s| s.token_types()).collect();
    type_overlap(&types)
}

/// `baseline − other`; positive means the other calibration fits better.
pub fn delta_ppl(baseline: f64, other: f64) -> Result<f64> {
    for v in [baseline, other] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(QlabError::NonPositivePpl(v));
        }
    }
    Ok(baseline - other)
}
