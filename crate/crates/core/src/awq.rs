//! AWQ: per-channel activation statistics, salient-channel selection,
//! channel scaling and grouped grid quantization.

use serde::{Deserialize, Serialize};

use crate::error::{QlabError, Result};
use crate::numerics::{median, Matrix};
use crate::quantgrid::{grouped_quantize, Method, QuantSpec, QuantizedTensor};

/// How salient-channel scales are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ScaleMode {
    /// `s_j = mean_abs_j / median(mean_abs)`.
    ActivationRatio,
    /// `s_j = c · max|W[:,j]| / median_k max|W[:,k]|`.
    WeightMax { c: f64 },
}

impl ScaleMode {
    pub fn name(&self) -> &'static str {
        match self {
            ScaleMode::ActivationRatio => "activation-ratio",
            ScaleMode::WeightMax { .. } => "weight-max",
        }
    }
}

fn default_fraction() -> f64 {
    0.01
}
fn default_s_max() -> f64 {
    16.0
}
fn default_mode() -> ScaleMode {
    ScaleMode::ActivationRatio
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AwqConfig {
    #[serde(default = "default_fraction")]
    pub salience_fraction: f64,
    #[serde(default = "default_s_max")]
    pub s_max: f64,
    #[serde(default = "default_mode")]
    pub mode: ScaleMode,
}

impl Default for AwqConfig {
    fn default() -> Self {
        Self {
            salience_fraction: default_fraction(),
            s_max: default_s_max(),
            mode: default_mode(),
        }
    }
}

impl AwqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.salience_fraction > 0.0 && self.salience_fraction <= 1.0) {
            return Err(QlabError::config("/awq/salience_fraction", "must lie in (0, 1]"));
        }
        if !(self.s_max >= 1.0 && self.s_max.is_finite()) {
            return Err(QlabError::config("/awq/s_max", "must be finite and >= 1"));
        }
        if let ScaleMode::WeightMax { c } = self.mode {
            if !(c > 0.0 && c.is_finite()) {
                return Err(QlabError::config("/awq/mode/c", "must be positive"));
            }
        }
        Ok(())
    }

    /// `ceil(fraction · d)`, at least 1.
    pub fn salient_count(&self, dim: usize) -> usize {
        ((self.salience_fraction * dim as f64).ceil() as usize).clamp(1, dim.max(1))
    }
}

/// Per-input-channel activation magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    dim: usize,
    sum_abs: Vec<f64>,
    max_abs: Vec<f64>,
    n_samples: usize,
}

impl ChannelStats {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            sum_abs: vec![0.0; dim],
            max_abs: vec![0.0; dim],
            n_samples: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn mean_abs(&self) -> Vec<f64> {
        if self.n_samples == 0 {
            return vec![0.0; self.dim];
        }
        let n = self.n_samples as f64;
        self.sum_abs.iter().map(|s| s / n).collect()
    }

    pub fn max_abs(&self) -> &[f64] {
        &self.max_abs
    }

    /// Folds in a `dim × m` batch of activation columns.
    pub fn collect(&mut self, batch: &Matrix) -> Result<()> {
        if batch.rows() != self.dim {
            return Err(QlabError::DimMismatch {
                context: "awq stats batch rows",
                expected: self.dim,
                got: batch.rows(),
            });
        }
        for j in 0..self.dim {
            for &v in batch.row(j) {
                let a = v.abs() as f64;
                self.sum_abs[j] += a;
                if a > self.max_abs[j] {
                    self.max_abs[j] = a;
                }
            }
        }
        self.n_samples += batch.cols();
        Ok(())
    }

    /// Index of the largest mean magnitude (lowest index on ties).
    pub fn argmax_mean(&self) -> Option<usize> {
        argmax(&self.sum_abs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.is_none_or(|b| x > v[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn collect_stats(stats: &mut ChannelStats, batch: &Matrix) -> Result<()> {
    stats.collect(batch)
}

/// Salient channel set and per-channel scales (1 outside the set).
#[derive(Debug, Clone, PartialEq)]
pub struct AwqScales {
    pub salient: Vec<usize>,
    pub scales: Vec<f32>,
    pub salience_fraction: f64,
    pub mode: ScaleMode,
}

impl AwqScales {
    pub fn ones(dim: usize) -> Self {
        Self {
            salient: Vec::new(),
            scales: vec![1.0; dim],
            salience_fraction: 0.0,
            mode: ScaleMode::ActivationRatio,
        }
    }

    pub fn dim(&self) -> usize {
        self.scales.len()
    }
}

/// Picks the top channels by mean |activation| and scales their weight columns.
pub fn select_scales(stats: &ChannelStats, w: &Matrix, cfg: &AwqConfig) -> Result<AwqScales> {
    cfg.validate()?;
    if stats.n_samples == 0 {
        return Err(QlabError::DegenerateCalibration("no activation samples collected"));
    }
    if w.cols() != stats.dim {
        return Err(QlabError::DimMismatch {
            context: "awq weight columns",
            expected: stats.dim,
            got: w.cols(),
        });
    }
    let mean = stats.mean_abs();
    if mean.iter().all(|&m| m == 0.0) {
        return Err(QlabError::DegenerateCalibration("all-zero channel activations"));
    }
    let d = stats.dim;
    let k = cfg.salient_count(d);
    let mut order: Vec<usize> = (0..d).collect();
    // stable sort keeps lower indices first among ties
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]));
    let mut salient = order[..k].to_vec();
    salient.sort_unstable();

    let ratio = |num: f64, den: f64| -> f64 {
        if num == 0.0 {
            1.0
        } else if den == 0.0 {
            cfg.s_max
        } else {
            num / den
        }
    };
    let mut scales = vec![1f32; d];
    match cfg.mode {
        ScaleMode::ActivationRatio => {
            let med = median(&mean);
            for &j in &salient {
                scales[j] = ratio(mean[j], med).clamp(1.0, cfg.s_max) as f32;
            }
        }
        ScaleMode::WeightMax { c } => {
            let col_max: Vec<f64> = (0..d)
                .map(|j| (0..w.rows()).fold(0f64, |m, r| m.max(w.get(r, j).abs() as f64)))
                .collect();
            let med = median(&col_max);
            for &j in &salient {
                scales[j] = (c * ratio(col_max[j], med)).clamp(1.0, cfg.s_max) as f32;
            }
        }
    }
    Ok(AwqScales {
        salient,
        scales,
        salience_fraction: cfg.salience_fraction,
        mode: cfg.mode,
    })
}

/// `W·diag(s)`.
pub fn scale_columns(w: &Matrix, scales: &[f32]) -> Matrix {
    Matrix::from_fn(w.rows(), w.cols(), |r, c| w.get(r, c) * scales[c])
}

/// `W'·diag(s)⁻¹`, mapping stored weights back to the original parameterization.
pub fn unscale_columns(w: &Matrix, scales: &[f32]) -> Matrix {
    Matrix::from_fn(w.rows(), w.cols(), |r, c| w.get(r, c) / scales[c])
}

/// Scales salient columns, then grouped min-max quantization. The scales are
/// stored in the tensor; inference computes `deq(Q)·(x ⊘ s)`.
pub fn awq_quantize(w: &Matrix, scales: &AwqScales, spec: &QuantSpec) -> Result<QuantizedTensor> {
    if scales.dim() != w.cols() {
        return Err(QlabError::DimMismatch {
            context: "awq scales",
            expected: w.cols(),
            got: scales.dim(),
        });
    }
    let scaled = scale_columns(w, &scales.scales);
    let mut q = grouped_quantize(&scaled, spec.bits, spec.group_size, Method::Awq)?;
    q.channel_scales = Some(scales.scales.clone());
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantgrid::{dequantize, rtn_quantize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats_from(mean: &[f64]) -> ChannelStats {
        let d = mean.len();
        let batch = Matrix::from_fn(d, 1, |r, _| mean[r] as f32);
        let mut s = ChannelStats::new(d);
        s.collect(&batch).unwrap();
        s
    }

    #[test]
    fn collect_direct() {
        let mut s = ChannelStats::new(2);
        s.collect(&Matrix::new(2, 2, vec![1.0, -3.0, 0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.mean_abs(), vec![2.0, 0.0]);
        assert_eq!(s.max_abs(), &[3.0, 0.0]);
        assert_eq!(s.n_samples(), 2);
        assert!(s.collect(&Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn collect_split_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::from_fn(3, 10, |_, _| rng.gen_range(-2.0..2.0));
        let mut a = ChannelStats::new(3);
        a.collect(&x).unwrap();
        let mut b = ChannelStats::new(3);
        b.collect(&Matrix::from_fn(3, 4, |r, c| x.get(r, c))).unwrap();
        b.collect(&Matrix::from_fn(3, 6, |r, c| x.get(r, c + 4))).unwrap();
        assert_eq!(a, b);

        let before = a.clone();
        a.collect(&Matrix::zeros(3, 5)).unwrap();
        assert_eq!(a.max_abs(), before.max_abs());
        assert_eq!(a.n_samples(), 15);
    }

    #[test]
    fn select_single_heavy_channel() {
        let s = stats_from(&[10.0, 1.0, 1.0, 1.0]);
        let cfg = AwqConfig {
            salience_fraction: 0.25,
            ..Default::default()
        };
        let sc = select_scales(&s, &Matrix::zeros(2, 4), &cfg).unwrap();
        assert_eq!(sc.salient, vec![0]);
        assert_eq!(sc.scales, vec![10.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn select_equal_means_is_noop() {
        let s = stats_from(&[2.0; 8]);
        let sc = select_scales(&s, &Matrix::zeros(1, 8), &AwqConfig::default()).unwrap();
        assert!(sc.scales.iter().all(|&v| v == 1.0));
        assert_eq!(sc.salient.len(), 1);
    }

    #[test]
    fn select_ties_break_low() {
        let s = stats_from(&[1.0, 5.0, 5.0, 1.0]);
        let sc = select_scales(&s, &Matrix::zeros(1, 4), &AwqConfig::default()).unwrap();
        assert_eq!(sc.salient, vec![1]);
    }

    #[test]
    fn select_caps_and_degenerate() {
        let s = stats_from(&[1000.0, 1.0, 1.0, 1.0]);
        let sc = select_scales(&s, &Matrix::zeros(1, 4), &AwqConfig::default()).unwrap();
        assert_eq!(sc.scales[0], 16.0);
        let z = stats_from(&[0.0; 4]);
        assert!(matches!(
            select_scales(&z, &Matrix::zeros(1, 4), &AwqConfig::default()),
            Err(QlabError::DegenerateCalibration(_))
        ));
        assert!(matches!(
            select_scales(&ChannelStats::new(4), &Matrix::zeros(1, 4), &AwqConfig::default()),
            Err(QlabError::DegenerateCalibration(_))
        ));
    }

    #[test]
    fn weight_max_mode() {
        let s = stats_from(&[9.0, 1.0, 1.0, 1.0]);
        let w = Matrix::new(1, 4, vec![4.0, 1.0, -1.0, 1.0]).unwrap();
        let cfg = AwqConfig {
            mode: ScaleMode::WeightMax { c: 1.0 },
            ..Default::default()
        };
        let sc = select_scales(&s, &w, &cfg).unwrap();
        assert_eq!(sc.scales, vec![4.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn ones_scaling_matches_rtn() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::from_fn(8, 20, |_, _| rng.gen_range(-1.0..1.0));
        let spec = QuantSpec::new(Method::Awq).with_group_size(8);
        let a = awq_quantize(&w, &AwqScales::ones(20), &spec).unwrap();
        let r = rtn_quantize(&w, &spec).unwrap();
        assert_eq!(a.codes, r.codes);
        assert_eq!(a.group_params, r.group_params);
        assert_eq!(dequantize(&a).unwrap(), dequantize(&r).unwrap());
        assert!(awq_quantize(&w, &AwqScales::ones(3), &spec).is_err());
    }

    #[test]
    fn argmax_stable_under_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::from_fn(16, 30, |r, _| rng.gen_range(-1.0..1.0) * (1.0 + r as f32 / 4.0));
        let mut a = ChannelStats::new(16);
        a.collect(&x).unwrap();
        let mut b = ChannelStats::new(16);
        b.collect(&x.scaled(7.5)).unwrap();
        assert_eq!(a.argmax_mean(), b.argmax_mean());
    }

    #[test]
    fn batch_order_does_not_change_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::from_fn(32, 40, |r, _| rng.gen_range(-1.0..1.0) * if r == 5 { 20.0 } else { 1.0 });
        let w = Matrix::from_fn(4, 32, |_, _| rng.gen_range(-1.0..1.0));
        let first = Matrix::from_fn(32, 20, |r, c| x.get(r, c));
        let second = Matrix::from_fn(32, 20, |r, c| x.get(r, c + 20));
        let mut a = ChannelStats::new(32);
        a.collect(&first).unwrap();
        a.collect(&second).unwrap();
        let mut b = ChannelStats::new(32);
        b.collect(&second).unwrap();
        b.collect(&first).unwrap();
        let cfg = AwqConfig::default();
        let (sa, sb) = (select_scales(&a, &w, &cfg).unwrap(), select_scales(&b, &w, &cfg).unwrap());
        assert_eq!(sa.salient, sb.salient);
        for (u, v) in sa.scales.iter().zip(&sb.scales) {
            assert!((u - v).abs() as f64 <= 1e-12 * (*u as f64));
        }
        assert_eq!(sa.salient, vec![5]);
    }
}
