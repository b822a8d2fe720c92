//! Dense row-major matrices, symmetric quantization primitives and error
//! metrics.
//!
//! Rows are tokens and columns are channels for activations. All quantizers
//! here are symmetric: the integer range for `b` bits is
//! `[-(2^(b-1) - 1), 2^(b-1) - 1]`, so the most negative two's complement
//! value is never produced. Rounding is half-away-from-zero everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest quantized magnitude for a symmetric `bits`-bit integer.
pub fn qmax(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Bit widths accepted by the quantizers.
pub const QUANT_BITS: [u32; 3] = [4, 8, 16];

pub(crate) fn check_quant_bits(bits: u32) -> Result<()> {
    if QUANT_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::BitWidth(bits))
    }
}

/// Round half away from zero and saturate into the symmetric range.
#[inline]
pub(crate) fn round_clamp(value: f64, bits: u32) -> i64 {
    let limit = qmax(bits) as f64;
    value.round().clamp(-limit, limit) as i64
}

#[inline]
pub(crate) fn fits(value: i64, bits: u32) -> bool {
    value.unsigned_abs() <= qmax(bits) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FloatMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Builds a matrix from a generator. Panics if the generator yields a
    /// non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                assert!(v.is_finite(), "non-finite value at ({i}, {j})");
                data.push(v);
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_slice(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.cols, "column range out of bounds");
        Self::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_slice(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn abs_max(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }
}

/// Signed integer matrix whose elements all lie in the symmetric range of
/// its declared bit width. Storage is `i64` regardless of the width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    bits: u32,
    data: Vec<i64>,
}

impl IntMatrix {
    /// Bit widths from 2 to 63 are accepted; 4/8/16 are quantized operands
    /// and 32 (or wider) is used for accumulators.
    pub fn new(rows: usize, cols: usize, bits: u32, data: Vec<i64>) -> Result<Self> {
        if !(2..=63).contains(&bits) {
            return Err(Error::BitWidth(bits));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| !fits(v, bits)) {
            return Err(Error::OutOfRange { index, value, bits });
        }
        Ok(Self { rows, cols, bits, data })
    }

    pub fn zeros(rows: usize, cols: usize, bits: u32) -> Self {
        Self { rows, cols, bits, data: vec![0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> i64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[i64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self { rows: self.cols, cols: self.rows, bits: self.bits, data }
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, bits: u32, data: Vec<i64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(data.iter().all(|&v| fits(v, bits)));
        Self { rows, cols, bits, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerRow,
    PerColumn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub granularity: Granularity,
    pub scales: Vec<f64>,
}

impl QuantParams {
    #[inline]
    fn scale_at(&self, row: usize, col: usize) -> f64 {
        match self.granularity {
            Granularity::PerTensor => self.scales[0],
            Granularity::PerRow => self.scales[row],
            Granularity::PerColumn => self.scales[col],
        }
    }
}

/// Scale for a group with the given absolute maximum. An all-zero group
/// gets scale 1.
#[inline]
pub fn symmetric_scale(abs_max: f64, bits: u32) -> f64 {
    if abs_max == 0.0 {
        1.0
    } else {
        abs_max / qmax(bits) as f64
    }
}

pub fn quantize_symmetric(
    x: &FloatMatrix,
    bits: u32,
    granularity: Granularity,
) -> Result<(IntMatrix, QuantParams)> {
    check_quant_bits(bits)?;
    let (rows, cols) = x.shape();
    let scales = match granularity {
        Granularity::PerTensor => vec![symmetric_scale(x.abs_max(), bits)],
        Granularity::PerRow => (0..rows)
            .map(|i| symmetric_scale(x.row(i).iter().fold(0.0, |m, v| m.max(v.abs())), bits))
            .collect(),
        Granularity::PerColumn => column_abs_max(x)
            .into_iter()
            .map(|m| symmetric_scale(m, bits))
            .collect(),
    };
    let params = QuantParams { granularity, scales };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(round_clamp(x.get(i, j) / params.scale_at(i, j), bits));
        }
    }
    Ok((IntMatrix::from_vec_unchecked(rows, cols, bits, data), params))
}

pub fn dequantize(q: &IntMatrix, params: &QuantParams) -> Result<FloatMatrix> {
    let (rows, cols) = q.shape();
    let expected = match params.granularity {
        Granularity::PerTensor => 1,
        Granularity::PerRow => rows,
        Granularity::PerColumn => cols,
    };
    if params.scales.len() != expected {
        return Err(Error::shape(format!(
            "{:?} parameters for a {rows}x{cols} matrix need {expected} scales, got {}",
            params.granularity,
            params.scales.len()
        )));
    }
    Ok(FloatMatrix::from_fn(rows, cols, |i, j| q.get(i, j) as f64 * params.scale_at(i, j)))
}

fn column_abs_max(x: &FloatMatrix) -> Vec<f64> {
    let mut out = vec![0.0f64; x.cols()];
    for i in 0..x.rows() {
        for (m, v) in out.iter_mut().zip(x.row(i)) {
            *m = m.max(v.abs());
        }
    }
    out
}

/// Per-channel midpoint `(max + min) / 2`. Subtracting it makes each
/// channel's extreme values equal in magnitude.
pub fn channel_bias(x: &FloatMatrix) -> Result<Vec<f64>> {
    if x.rows() == 0 {
        return Err(Error::shape("channel bias of an empty matrix"));
    }
    let mut lo = x.row(0).to_vec();
    let mut hi = lo.clone();
    for i in 1..x.rows() {
        for (j, &v) in x.row(i).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    Ok(lo.iter().zip(&hi).map(|(l, h)| (h + l) / 2.0).collect())
}

/// Per-channel absolute maxima (`cmax`) and their maximum (`tmax`).
/// Expects a bias-centered input.
pub fn channel_absmax(x: &FloatMatrix) -> (Vec<f64>, f64) {
    let cmax = column_abs_max(x);
    let tmax = cmax.iter().copied().fold(0.0, f64::max);
    (cmax, tmax)
}

pub fn matmul_float(a: &FloatMatrix, w: &FloatMatrix) -> Result<FloatMatrix> {
    if a.cols() != w.rows() {
        return Err(Error::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), w.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let acc = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.get(i, p);
            if av == 0.0 {
                continue;
            }
            for (o, wv) in acc.iter_mut().zip(w.row(p)) {
                *o += av * wv;
            }
        }
    }
    FloatMatrix::new(m, n, out)
}

/// Exact integer product accumulated in `i64`. Fails if any intermediate
/// overflows `i64` or any output falls outside the symmetric `out_bits`
/// range.
pub fn matmul_int_wide(a: &IntMatrix, w: &IntMatrix, out_bits: u32) -> Result<IntMatrix> {
    if a.cols() != w.rows() {
        return Err(Error::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            w.rows(),
            w.cols()
        )));
    }
    if !(2..=63).contains(&out_bits) {
        return Err(Error::BitWidth(out_bits));
    }
    let (m, k, n) = (a.rows(), a.cols(), w.cols());
    let mut out = vec![0i64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0i64;
            for p in 0..k {
                acc = a
                    .get(i, p)
                    .checked_mul(w.get(p, j))
                    .and_then(|prod| acc.checked_add(prod))
                    .ok_or_else(|| Error::Overflow(format!("i64 accumulation at ({i}, {j})")))?;
            }
            if !fits(acc, out_bits) {
                return Err(Error::Overflow(format!(
                    "output ({i}, {j}) = {acc} exceeds {out_bits} bits"
                )));
            }
            out[i * n + j] = acc;
        }
    }
    Ok(IntMatrix::from_vec_unchecked(m, n, out_bits, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mse: f64,
    pub max_abs_err: f64,
    /// `+inf` when the error power is zero.
    #[serde(with = "crate::serde_float")]
    pub sqnr_db: f64,
}

pub fn error_metrics(reference: &FloatMatrix, approx: &FloatMatrix) -> Result<ErrorMetrics> {
    if reference.shape() != approx.shape() {
        return Err(Error::shape(format!(
            "metrics between {:?} and {:?}",
            reference.shape(),
            approx.shape()
        )));
    }
    let mut signal = 0.0;
    let mut noise = 0.0;
    let mut max_abs_err = 0.0f64;
    for (r, a) in reference.data().iter().zip(approx.data()) {
        let e = r - a;
        signal += r * r;
        noise += e * e;
        max_abs_err = max_abs_err.max(e.abs());
    }
    let n = reference.data().len().max(1) as f64;
    let sqnr_db = if noise == 0.0 { f64::INFINITY } else { 10.0 * (signal / noise).log10() };
    Ok(ErrorMetrics { mse: noise / n, max_abs_err, sqnr_db })
}
