//! Asymmetric min-max integer grids, grouped quantize/dequantize and the
//! round-to-nearest baseline.

use serde::{Deserialize, Serialize};

use crate::awq::AwqConfig;
use crate::error::{QlabError, Result};
use crate::numerics::Matrix;

/// Smallest grid step; constant groups get this scale.
pub const MIN_SCALE: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rtn,
    Gptq,
    Awq,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Rtn => "rtn",
            Method::Gptq => "gptq",
            Method::Awq => "awq",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Method::Rtn => 0,
            Method::Gptq => 1,
            Method::Awq => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Method::Rtn),
            1 => Some(Method::Gptq),
            2 => Some(Method::Awq),
            _ => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = QlabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtn" => Ok(Method::Rtn),
            "gptq" => Ok(Method::Gptq),
            "awq" => Ok(Method::Awq),
            other => Err(QlabError::config(
                "/method",
                format!("unknown method `{other}` (expected gptq, awq or rtn)"),
            )),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_bits() -> u8 {
    4
}
fn default_group_size() -> usize {
    128
}
fn default_damping() -> f64 {
    0.01
}
fn default_batch_size() -> usize {
    2
}
fn default_capture_cap() -> usize {
    8192
}

/// Quantization hyperparameters shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    #[serde(default = "default_bits")]
    pub bits: u8,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    pub method: Method,
    /// Damping as a fraction of the mean Hessian diagonal.
    #[serde(default = "default_damping")]
    pub damping: f64,
    /// Extend GPTQ error compensation past the current group to all trailing columns.
    #[serde(default)]
    pub cross_group_propagation: bool,
    #[serde(default)]
    pub awq: AwqConfig,
    /// Calibration sequences per forward batch.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Max captured activation columns per projection (reservoir-sampled beyond).
    #[serde(default = "default_capture_cap")]
    pub capture_cap: usize,
    #[serde(default)]
    pub seed: u64,
}

impl QuantSpec {
    pub fn new(method: Method) -> Self {
        Self {
            bits: default_bits(),
            group_size: default_group_size(),
            method,
            damping: default_damping(),
            cross_group_propagation: false,
            awq: AwqConfig::default(),
            batch_size: default_batch_size(),
            capture_cap: default_capture_cap(),
            seed: 0,
        }
    }

    pub fn with_bits(mut self, bits: u8) -> Self {
        self.bits = bits;
        self
    }

    pub fn with_group_size(mut self, group_size: usize) -> Self {
        self.group_size = group_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.group_size == 0 {
            return Err(QlabError::config("/group_size", "must be >= 1"));
        }
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return Err(QlabError::config("/damping", "must be a positive finite fraction"));
        }
        if self.batch_size == 0 {
            return Err(QlabError::config("/batch_size", "must be >= 1"));
        }
        if self.capture_cap == 0 {
            return Err(QlabError::config("/capture_cap", "must be >= 1"));
        }
        self.awq.validate()
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if (2..=8).contains(&bits) {
        Ok(())
    } else {
        Err(QlabError::config("/bits", format!("bits must be in [2, 8], got {bits}")))
    }
}

/// Grid step, integer zero point and bit width of one quantization group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridParams {
    pub scale: f32,
    pub zero_point: u32,
    pub bits: u8,
}

impl GridParams {
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn dequantize(&self, code: u8) -> f32 {
        (code as f32 - self.zero_point as f32) * self.scale
    }
}

/// Fits an asymmetric min-max grid.
///
/// `scale = (max - min) / (2^bits - 1)` floored at [`MIN_SCALE`],
/// `zero_point = round(-min / scale)` clamped to the code range.
pub fn fit_grid(values: &[f32], bits: u8) -> Result<GridParams> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(QlabError::EmptyInput("fit_grid"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        if !v.is_finite() {
            return Err(QlabError::NonFiniteInput("fit_grid"));
        }
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    let max_code = (1u32 << bits) - 1;
    let exact = ((hi - lo) / max_code as f64).max(MIN_SCALE as f64);
    let scale = (exact as f32).max(MIN_SCALE);
    let zp = (-lo / exact).round().clamp(0.0, max_code as f64) as u32;
    Ok(GridParams {
        scale,
        zero_point: zp,
        bits,
    })
}

/// Nearest grid code, clamped to `[0, 2^bits - 1]`. Ties round away from zero.
#[inline]
pub fn quantize_value(w: f32, g: &GridParams) -> u8 {
    let q = (w as f64 / g.scale as f64).round() + g.zero_point as f64;
    q.clamp(0.0, g.max_code() as f64) as u8
}

/// Bytes needed to store one row of `cols` codes.
pub fn packed_row_len(cols: usize, bits: u8) -> usize {
    if bits == 4 {
        cols.div_ceil(2)
    } else {
        cols
    }
}

/// Packs one row of codes: two per byte (low nibble = even column) at 4 bits,
/// one per byte otherwise.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    if bits != 4 {
        return codes.to_vec();
    }
    codes
        .chunks(2)
        .map(|pair| (pair[0] & 0x0f) | (pair.get(1).copied().unwrap_or(0) << 4))
        .collect()
}

pub fn unpack_codes(packed: &[u8], cols: usize, bits: u8) -> Vec<u8> {
    if bits != 4 {
        return packed[..cols].to_vec();
    }
    (0..cols)
        .map(|c| {
            let b = packed[c / 2];
            if c % 2 == 0 {
                b & 0x0f
            } else {
                b >> 4
            }
        })
        .collect()
}

/// Packed low-bit weight matrix with per-(row, group) grids.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub group_size: usize,
    pub method: Method,
    /// Row-major, each row padded to a whole byte.
    pub codes: Vec<u8>,
    /// `rows * n_groups` entries, row-major.
    pub group_params: Vec<GridParams>,
    /// Per-input-channel AWQ scales; the stored weights are `W·diag(s)`.
    pub channel_scales: Option<Vec<f32>>,
}

impl QuantizedTensor {
    pub fn n_groups(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn row_stride(&self) -> usize {
        packed_row_len(self.cols, self.bits)
    }

    pub fn row_codes(&self, r: usize) -> Vec<u8> {
        let stride = self.row_stride();
        unpack_codes(&self.codes[r * stride..(r + 1) * stride], self.cols, self.bits)
    }

    /// All codes unpacked, row-major.
    pub fn unpacked_codes(&self) -> Vec<u8> {
        (0..self.rows).flat_map(|r| self.row_codes(r)).collect()
    }

    pub fn grid(&self, r: usize, c: usize) -> &GridParams {
        &self.group_params[r * self.n_groups() + c / self.group_size]
    }

    /// Checks container consistency.
    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.group_size == 0 {
            return Err(QlabError::ShapeMismatch("group_size is zero".into()));
        }
        if self.codes.len() != self.rows * self.row_stride() {
            return Err(QlabError::ShapeMismatch(format!(
                "{} code bytes for {}x{} at {} bits",
                self.codes.len(),
                self.rows,
                self.cols,
                self.bits
            )));
        }
        if self.group_params.len() != self.rows * self.n_groups() {
            return Err(QlabError::ShapeMismatch(format!(
                "{} group grids, expected {}",
                self.group_params.len(),
                self.rows * self.n_groups()
            )));
        }
        if let Some(s) = &self.channel_scales {
            if s.len() != self.cols {
                return Err(QlabError::ShapeMismatch(format!(
                    "{} channel scales for {} columns",
                    s.len(),
                    self.cols
                )));
            }
        }
        let max = (1u16 << self.bits) - 1;
        if (0..self.rows).any(|r| self.row_codes(r).iter().any(|&c| c as u16 > max)) {
            return Err(QlabError::ShapeMismatch("code exceeds bit width".into()));
        }
        Ok(())
    }
}

/// Assembles a tensor from unpacked row-major codes.
pub(crate) fn assemble(
    rows: usize,
    cols: usize,
    bits: u8,
    group_size: usize,
    method: Method,
    codes: &[u8],
    group_params: Vec<GridParams>,
    channel_scales: Option<Vec<f32>>,
) -> QuantizedTensor {
    let packed = codes
        .chunks(cols.max(1))
        .take(rows)
        .flat_map(|row| pack_codes(row, bits))
        .collect();
    QuantizedTensor {
        rows,
        cols,
        bits,
        group_size,
        method,
        codes: if cols == 0 { Vec::new() } else { packed },
        group_params,
        channel_scales,
    }
}

/// `(code - zero_point) * scale` per entry. AWQ channel scales are not undone.
pub fn dequantize(q: &QuantizedTensor) -> Result<Matrix> {
    q.validate()?;
    let mut out = Matrix::zeros(q.rows, q.cols);
    for r in 0..q.rows {
        let codes = q.row_codes(r);
        let row = out.row_mut(r);
        for (c, (&code, slot)) in codes.iter().zip(row.iter_mut()).enumerate() {
            *slot = q.grid(r, c).dequantize(code);
        }
    }
    Ok(out)
}

/// Per-row grouped min-max quantization; the last partial group gets its own grid.
pub(crate) fn grouped_quantize(
    w: &Matrix,
    bits: u8,
    group_size: usize,
    method: Method,
) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    if group_size == 0 {
        return Err(QlabError::config("/group_size", "must be >= 1"));
    }
    let (rows, cols) = w.shape();
    let mut codes = Vec::with_capacity(rows * cols);
    let mut params = Vec::with_capacity(rows * cols.div_ceil(group_size));
    for r in 0..rows {
        for group in w.row(r).chunks(group_size) {
            let g = fit_grid(group, bits)?;
            codes.extend(group.iter().map(|&v| quantize_value(v, &g)));
            params.push(g);
        }
    }
    Ok(assemble(rows, cols, bits, group_size, method, &codes, params, None))
}

/// Round-to-nearest baseline: no calibration data.
pub fn rtn_quantize(w: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    grouped_quantize(w, spec.bits, spec.group_size, Method::Rtn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fit_grid_examples() {
        let g = fit_grid(&[0.0, 1.0], 2).unwrap();
        assert_eq!(g.scale, (1.0f64 / 3.0) as f32);
        assert_eq!(g.zero_point, 0);

        let g = fit_grid(&[5.0, 5.0, 5.0], 4).unwrap();
        assert_eq!(g.scale, MIN_SCALE);
        let codes: Vec<u8> = [5.0f32; 3].iter().map(|&v| quantize_value(v, &g)).collect();
        assert!(codes.windows(2).all(|w| w[0] == w[1]));

        let g = fit_grid(&[-1.0, 1.0], 4).unwrap();
        assert_eq!(g.scale, (2.0f64 / 15.0) as f32);
        assert_eq!(g.zero_point, 8, "7.5 rounds half away from zero");
    }

    #[test]
    fn fit_grid_errors() {
        assert!(matches!(
            fit_grid(&[1.0, f32::NAN], 4),
            Err(QlabError::NonFiniteInput(_))
        ));
        assert!(matches!(fit_grid(&[], 4), Err(QlabError::EmptyInput(_))));
        assert!(fit_grid(&[1.0], 9).is_err());
        assert!(fit_grid(&[1.0], 1).is_err());
    }

    #[test]
    fn quantize_value_examples() {
        let g = GridParams {
            scale: 1.0 / 3.0,
            zero_point: 0,
            bits: 2,
        };
        assert_eq!(quantize_value(0.0, &g), 0);
        assert_eq!(quantize_value(0.34, &g), 1);
        assert_eq!(quantize_value(9.9, &g), 3);
        assert_eq!(quantize_value(-9.9, &g), 0);
    }

    #[test]
    fn rtn_small_row() {
        let w = Matrix::new(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let spec = QuantSpec::new(Method::Rtn).with_bits(2).with_group_size(4);
        let q = rtn_quantize(&w, &spec).unwrap();
        assert_eq!(q.unpacked_codes(), vec![0, 1, 2, 3]);
        assert_eq!(dequantize(&q).unwrap(), w, "on-grid input is idempotent");
    }

    #[test]
    fn zero_matrix_round_trip() {
        let w = Matrix::zeros(3, 7);
        let q = rtn_quantize(&w, &QuantSpec::new(Method::Rtn).with_group_size(4)).unwrap();
        assert_eq!(dequantize(&q).unwrap(), w);
        assert_eq!(q.n_groups(), 2);
        assert_eq!(q.group_params.len(), 6);
    }

    #[test]
    fn dequantize_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Matrix::from_fn(1, 4, |_, _| rng.gen_range(-2.0..2.0));
        let q = rtn_quantize(&w, &QuantSpec::new(Method::Rtn).with_group_size(4)).unwrap();
        let deq = dequantize(&q).unwrap();
        // scalar reference
        let vals = w.row(0);
        let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let scale = ((hi - lo) / 15.0) as f32;
        let zp = (-lo / scale as f64).round().clamp(0.0, 15.0);
        for (c, &v) in vals.iter().enumerate() {
            let code = ((v as f64 / scale as f64).round() + zp).clamp(0.0, 15.0);
            let expect = (code as f32 - zp as f32) * scale;
            assert_eq!(deq.get(0, c), expect);
        }
    }

    #[test]
    fn rtn_error_bound_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Matrix::from_fn(64, 64, |_, _| rng.gen_range(-1.0..1.0));
        let spec = QuantSpec::new(Method::Rtn).with_group_size(16);
        let q = rtn_quantize(&w, &spec).unwrap();
        let deq = dequantize(&q).unwrap();
        let max_half = q.group_params.iter().map(|g| g.scale).fold(0f32, f32::max) / 2.0;
        for (a, b) in w.data().iter().zip(deq.data()) {
            assert!((a - b).abs() <= max_half * (1.0 + 1e-5));
        }
    }

    #[test]
    fn corrupt_container_is_rejected() {
        let w = Matrix::from_fn(2, 5, |r, c| (r * 5 + c) as f32);
        let mut q = rtn_quantize(&w, &QuantSpec::new(Method::Rtn)).unwrap();
        q.codes.pop();
        assert!(matches!(dequantize(&q), Err(QlabError::ShapeMismatch(_))));
    }

    proptest! {
        #[test]
        fn pack_round_trip(codes in prop::collection::vec(0u8..16, 0..65)) {
            let packed = pack_codes(&codes, 4);
            prop_assert_eq!(packed.len(), packed_row_len(codes.len(), 4));
            prop_assert_eq!(unpack_codes(&packed, codes.len(), 4), codes.clone());
            prop_assert_eq!(unpack_codes(&pack_codes(&codes, 3), codes.len(), 3), codes);
        }

        #[test]
        fn quantize_value_monotone(a in -10.0f32..10.0, b in -10.0f32..10.0, bits in 2u8..=8) {
            let g = fit_grid(&[-3.0, 4.0], bits).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_value(lo, &g) <= quantize_value(hi, &g));
        }

        #[test]
        fn rtn_idempotent(seed in 0u64..500, rows in 1usize..6, cols in 1usize..40, bits in 2u8..=8) {
            // Groups straddle zero; a one-sided group saturates at the clamped zero point.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut w = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
            for r in 0..rows {
                for start in (0..cols).step_by(8) {
                    let end = (start + 8).min(cols);
                    if end - start == 1 {
                        w.set(r, start, 0.0);
                    } else {
                        w.set(r, start, -w.get(r, start).abs() - 0.01);
                        w.set(r, end - 1, w.get(r, end - 1).abs() + 0.01);
                    }
                }
            }
            let spec = QuantSpec::new(Method::Rtn).with_bits(bits).with_group_size(8);
            let q1 = rtn_quantize(&w, &spec).unwrap();
            let q2 = rtn_quantize(&dequantize(&q1).unwrap(), &spec).unwrap();
            prop_assert_eq!(q1.unpacked_codes(), q2.unpacked_codes());
        }
    }
}
