//! GPTQ: Hessian accumulation, damped inverse and column-sequential
//! quantization with error compensation.

use crate::error::{QlabError, Result};
use crate::numerics::{cholesky_f64, invert_spd_f64, Matrix};
use crate::quantgrid::{assemble, fit_grid, quantize_value, GridParams, Method, QuantSpec, QuantizedTensor};

const LAMBDA_FLOOR: f64 = 1e-8;
const DIAG_GUARD: f64 = 1e-12;

/// Running `Σ x·xᵀ` over calibration activation columns.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianAccumulator {
    dim: usize,
    sum_xxt: Vec<f64>,
    n_samples: usize,
    damping_fraction: f64,
}

impl HessianAccumulator {
    pub fn new(dim: usize, damping_fraction: f64) -> Self {
        Self {
            dim,
            sum_xxt: vec![0.0; dim * dim],
            n_samples: 0,
            damping_fraction,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn sum_xxt(&self) -> &[f64] {
        &self.sum_xxt
    }

    /// Adds `batch·batchᵀ` for a `dim × m` batch of activation columns.
    pub fn accumulate(&mut self, batch: &Matrix) -> Result<()> {
        if batch.rows() != self.dim {
            return Err(QlabError::DimMismatch {
                context: "hessian batch rows",
                expected: self.dim,
                got: batch.rows(),
            });
        }
        let d = self.dim;
        for i in 0..d {
            let ri = batch.row(i);
            for j in 0..=i {
                let s = crate::numerics::dot(ri, batch.row(j));
                self.sum_xxt[i * d + j] += s;
                if i != j {
                    self.sum_xxt[j * d + i] += s;
                }
            }
        }
        self.n_samples += batch.cols();
        Ok(())
    }

    /// `H = 2·Σxxᵀ + λI` with `λ = damping_fraction · mean(diag(2·Σxxᵀ))`, floored at 1e-8.
    pub fn finalize(&self) -> Result<Matrix> {
        let (h, _) = self.finalize_f64()?;
        Matrix::from_f64(self.dim, self.dim, &h)
    }

    pub(crate) fn finalize_f64(&self) -> Result<(Vec<f64>, f64)> {
        let d = self.dim;
        if self.n_samples == 0 {
            return Err(QlabError::DegenerateCalibration("no calibration samples accumulated"));
        }
        let mut h: Vec<f64> = self.sum_xxt.iter().map(|v| 2.0 * v).collect();
        let mean_diag = (0..d).map(|i| h[i * d + i]).sum::<f64>() / d.max(1) as f64;
        if mean_diag <= 0.0 {
            return Err(QlabError::DegenerateCalibration("all-zero calibration activations"));
        }
        let lambda = (self.damping_fraction * mean_diag).max(LAMBDA_FLOOR);
        for i in 0..d {
            h[i * d + i] += lambda;
        }
        Ok((h, lambda))
    }
}

/// Free-function form of [`HessianAccumulator::accumulate`].
pub fn accumulate(acc: &mut HessianAccumulator, batch: &Matrix) -> Result<()> {
    acc.accumulate(batch)
}

pub fn finalize_hessian(acc: &HessianAccumulator) -> Result<Matrix> {
    acc.finalize()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GptqResult {
    pub quantized: QuantizedTensor,
    /// `tr((W - Ŵ) H (W - Ŵ)ᵀ)` against the original weights.
    pub proxy_error: f64,
    /// Per column, `Σ_rows (w - ŵ)² / U[j,j]²` where `U` is the upper Cholesky factor of `H⁻¹`.
    pub per_column_error: Vec<f64>,
}

/// `tr((W - Ŵ)·H·(W - Ŵ)ᵀ)`, accumulated in `f64`.
pub fn proxy_error(w: &Matrix, w_hat: &Matrix, h: &Matrix) -> Result<f64> {
    if w.shape() != w_hat.shape() {
        return Err(QlabError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            w.shape(),
            w_hat.shape()
        )));
    }
    if h.rows() != w.cols() || h.cols() != w.cols() {
        return Err(QlabError::DimMismatch {
            context: "proxy_error hessian",
            expected: w.cols(),
            got: h.rows(),
        });
    }
    let hf = h.to_f64();
    Ok(proxy_error_f64(w, w_hat, &hf))
}

fn proxy_error_f64(w: &Matrix, w_hat: &Matrix, h: &[f64]) -> f64 {
    let d = w.cols();
    let mut total = 0.0;
    let mut delta = vec![0f64; d];
    for r in 0..w.rows() {
        for (c, slot) in delta.iter_mut().enumerate() {
            *slot = w.get(r, c) as f64 - w_hat.get(r, c) as f64;
        }
        for i in 0..d {
            if delta[i] == 0.0 {
                continue;
            }
            let hrow = &h[i * d..(i + 1) * d];
            let s: f64 = hrow.iter().zip(&delta).map(|(a, b)| a * b).sum();
            total += delta[i] * s;
        }
    }
    total.max(0.0)
}

/// Quantizes `W` (rows × d) column by column, compensating each column's
/// rounding error on the not-yet-quantized columns of the same group (or all
/// trailing columns with `cross_group_propagation`).
///
/// The grid of each (row, group) is fitted from the current weights when the
/// group starts.
pub fn gptq_quantize(w: &Matrix, h: &Matrix, spec: &QuantSpec) -> Result<GptqResult> {
    spec.validate()?;
    let (rows, d) = w.shape();
    if h.rows() != d || h.cols() != d {
        return Err(QlabError::DimMismatch {
            context: "gptq hessian dimension",
            expected: d,
            got: h.rows(),
        });
    }
    let hf = h.to_f64();
    let hinv = invert_spd_f64(d, &hf)?;
    // Row j of the upper factor holds the inverse Hessian with columns < j
    // already eliminated, scaled by 1/sqrt of its pivot.
    let chol = cholesky_f64(d, &hinv)?;
    let upper = |j: usize, k: usize| chol.get(k, j);
    for j in 0..d {
        let piv = chol.diag(j);
        if piv * piv < DIAG_GUARD {
            return Err(QlabError::BrokenDamping {
                column: j,
                value: piv * piv,
            });
        }
    }

    let bsize = spec.group_size;
    let n_groups = d.div_ceil(bsize);
    let mut work: Vec<f64> = w.to_f64();
    let mut codes = vec![0u8; rows * d];
    let mut grids: Vec<GridParams> = Vec::with_capacity(rows * n_groups);
    grids.resize(
        rows * n_groups,
        GridParams {
            scale: 1.0,
            zero_point: 0,
            bits: spec.bits,
        },
    );
    let mut per_column_error = vec![0f64; d];
    let mut row_buf = vec![0f32; bsize];
    let mut errs = vec![0f64; rows];

    for (g, start) in (0..d).step_by(bsize).enumerate() {
        let end = (start + bsize).min(d);
        for r in 0..rows {
            let cur = &work[r * d + start..r * d + end];
            for (dst, &v) in row_buf.iter_mut().zip(cur) {
                *dst = v as f32;
            }
            grids[r * n_groups + g] = fit_grid(&row_buf[..end - start], spec.bits)?;
        }
        let limit = if spec.cross_group_propagation { d } else { end };
        for j in start..end {
            let ujj = upper(j, j);
            for r in 0..rows {
                let grid = &grids[r * n_groups + g];
                let wv = work[r * d + j];
                let code = quantize_value(wv as f32, grid);
                codes[r * d + j] = code;
                let e = (wv - grid.dequantize(code) as f64) / ujj;
                per_column_error[j] += e * e;
                errs[r] = e;
            }
            for k in j..limit {
                let ujk = upper(j, k);
                if ujk == 0.0 {
                    continue;
                }
                for (r, &e) in errs.iter().enumerate() {
                    work[r * d + k] -= e * ujk;
                }
            }
        }
    }

    let quantized = assemble(rows, d, spec.bits, bsize, Method::Gptq, &codes, grids, None);
    let deq = crate::quantgrid::dequantize(&quantized)?;
    let proxy_error = proxy_error_f64(w, &deq, &hf);
    Ok(GptqResult {
        quantized,
        proxy_error,
        per_column_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantgrid::{dequantize, rtn_quantize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.sample::<f32, _>(StandardNormal))
    }

    fn spd(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let x = gaussian(d, 2 * d, rng);
        let mut acc = HessianAccumulator::new(d, 0.01);
        acc.accumulate(&x).unwrap();
        acc.finalize().unwrap()
    }

    #[test]
    fn accumulate_outer_product() {
        let mut acc = HessianAccumulator::new(2, 0.01);
        acc.accumulate(&Matrix::new(2, 1, vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(acc.sum_xxt(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(acc.n_samples(), 1);
        assert!(matches!(
            acc.accumulate(&Matrix::zeros(3, 1)),
            Err(QlabError::DimMismatch { .. })
        ));
    }

    #[test]
    fn accumulate_split_equals_concatenated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(5, 12, &mut rng);
        let left = Matrix::from_fn(5, 7, |r, c| x.get(r, c));
        let right = Matrix::from_fn(5, 5, |r, c| x.get(r, c + 7));
        let mut a = HessianAccumulator::new(5, 0.01);
        a.accumulate(&x).unwrap();
        let mut b = HessianAccumulator::new(5, 0.01);
        b.accumulate(&left).unwrap();
        b.accumulate(&right).unwrap();
        for (u, v) in a.sum_xxt().iter().zip(b.sum_xxt()) {
            assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
        }
        assert_eq!(a.n_samples(), b.n_samples());
    }

    #[test]
    fn monte_carlo_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut acc = HessianAccumulator::new(4, 0.01);
        acc.accumulate(&gaussian(4, 100, &mut rng)).unwrap();
        // Frobenius norm bounds the spectral norm.
        let dev: f64 = acc
            .sum_xxt()
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let eye = if k % 5 == 0 { 1.0 } else { 0.0 };
                (v / 100.0 - eye).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        assert!(dev < 0.5, "deviation {dev}");
    }

    #[test]
    fn finalize_examples() {
        let mut acc = HessianAccumulator::new(2, 0.01);
        acc.accumulate(&Matrix::identity(2)).unwrap();
        let h = acc.finalize().unwrap();
        assert_eq!(h, Matrix::from_diag(&[2.02, 2.02]));

        let mut zero = HessianAccumulator::new(3, 0.01);
        zero.accumulate(&Matrix::zeros(3, 4)).unwrap();
        assert!(matches!(zero.finalize(), Err(QlabError::DegenerateCalibration(_))));
        assert!(matches!(
            HessianAccumulator::new(3, 0.01).finalize(),
            Err(QlabError::DegenerateCalibration(_))
        ));

        let mut rank1 = HessianAccumulator::new(3, 0.01);
        rank1.accumulate(&Matrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let h = rank1.finalize().unwrap();
        assert!(crate::numerics::cholesky(&h).is_ok());
        assert_eq!(h, h.transpose());
    }

    #[test]
    fn on_grid_weights_are_exact() {
        let w = Matrix::new(2, 4, vec![0.0, 1.0, 2.0, 3.0, 3.0, 0.0, 1.0, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = spd(4, &mut rng);
        let spec = QuantSpec::new(Method::Gptq).with_bits(2).with_group_size(4);
        let res = gptq_quantize(&w, &h, &spec).unwrap();
        assert_eq!(dequantize(&res.quantized).unwrap(), w);
        assert_eq!(res.proxy_error, 0.0);
        assert!(res.per_column_error.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn diagonal_hessian_matches_rtn() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = gaussian(16, 24, &mut rng);
        let diag: Vec<f32> = (0..24).map(|_| rng.gen_range(0.5..3.0)).collect();
        let h = Matrix::from_diag(&diag);
        let spec = QuantSpec::new(Method::Gptq).with_group_size(8);
        let g = gptq_quantize(&w, &h, &spec).unwrap();
        let r = rtn_quantize(&w, &spec).unwrap();
        assert_eq!(g.quantized.codes, r.codes);
        assert_eq!(g.quantized.group_params, r.group_params);
    }

    #[test]
    fn dimension_and_pd_errors() {
        let w = Matrix::zeros(2, 3);
        let spec = QuantSpec::new(Method::Gptq);
        assert!(matches!(
            gptq_quantize(&w, &Matrix::identity(4), &spec),
            Err(QlabError::DimMismatch { .. })
        ));
        let bad = Matrix::new(3, 3, vec![1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            gptq_quantize(&w, &bad, &spec),
            Err(QlabError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = spd(6, &mut rng);
        let res = gptq_quantize(&Matrix::zeros(3, 6), &h, &QuantSpec::new(Method::Gptq)).unwrap();
        assert_eq!(res.proxy_error, 0.0);
        assert_eq!(dequantize(&res.quantized).unwrap(), Matrix::zeros(3, 6));
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = gaussian(8, 16, &mut rng);
        let h = spd(16, &mut rng);
        let spec = QuantSpec::new(Method::Gptq).with_group_size(4);
        assert_eq!(gptq_quantize(&w, &h, &spec).unwrap(), gptq_quantize(&w, &h, &spec).unwrap());
    }

    #[test]
    fn group_codes_ignore_later_groups_without_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = gaussian(6, 16, &mut rng);
        let h = spd(16, &mut rng);
        let spec = QuantSpec::new(Method::Gptq).with_group_size(8);
        let full = gptq_quantize(&w, &h, &spec).unwrap();
        let truncated = Matrix::from_fn(6, 16, |r, c| if c < 8 { w.get(r, c) } else { 0.0 });
        let part = gptq_quantize(&truncated, &h, &spec).unwrap();
        for r in 0..6 {
            assert_eq!(full.quantized.row_codes(r)[..8], part.quantized.row_codes(r)[..8]);
        }
    }

    #[test]
    fn cross_group_propagation_changes_later_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = gaussian(8, 16, &mut rng);
        let h = spd(16, &mut rng);
        let mut spec = QuantSpec::new(Method::Gptq).with_group_size(4);
        let local = gptq_quantize(&w, &h, &spec).unwrap();
        spec.cross_group_propagation = true;
        let cross = gptq_quantize(&w, &h, &spec).unwrap();
        // first group sees identical inputs in both modes
        for r in 0..8 {
            assert_eq!(local.quantized.row_codes(r)[..4], cross.quantized.row_codes(r)[..4]);
        }
        assert_ne!(local.quantized.codes, cross.quantized.codes);
    }

    #[test]
    fn proxy_error_scales_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = gaussian(8, 16, &mut rng);
        let h = spd(16, &mut rng);
        let spec = QuantSpec::new(Method::Gptq).with_group_size(8);
        let base = gptq_quantize(&w, &h, &spec).unwrap().proxy_error;
        let scaled = gptq_quantize(&w.scaled(4.0), &h, &spec).unwrap().proxy_error;
        assert!((scaled / (16.0 * base) - 1.0).abs() < 1e-5, "{scaled} vs {base}");
    }
}
