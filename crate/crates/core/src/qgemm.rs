//! Quantized GEMM over decomposed activations.
//!
//! Two integer paths compute the same product:
//!
//! * [`gemm_explicit`] forms one integer partial `P_g` per channel group and
//!   dequantizes each with its own scale before summing in float.
//! * [`gemm_implicit`] streams the groups in ascending index (largest scale
//!   first) through a single integer accumulator, multiplying it by `α`
//!   before each new group, and dequantizes once with the smallest scale.
//!
//! Since adjacent scales differ by exactly `α`, the implicit accumulator is
//! `Σ_g α^(G-g) · P_g` and both paths agree up to float summation order.

use serde::Serialize;

use crate::calibrate::{
    bias_correction, quantize_activation, quantize_weight, self_calibrate, BiasCorrection,
    ChunkPlan, DecompositionPlan, PlanConfig, QuantizedActivation, QuantizedWeight,
};
use crate::error::{Error, Result};
use crate::tensor::{error_metrics, fits, matmul_float, qmax, ErrorMetrics, FloatMatrix, IntMatrix};

/// Accumulator register width of the integer paths unless overridden.
pub const DEFAULT_ACC_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    pub macs: u64,
    pub rescales: u64,
    /// Reductions started, summed over output elements.
    pub reduction_passes: u64,
    pub float_ops: u64,
}

#[derive(Debug, Clone)]
pub struct GemmResult {
    pub output: FloatMatrix,
    /// Final integer accumulator per output element (implicit path).
    pub accumulators: Option<IntMatrix>,
    /// One integer partial matrix per group (explicit path).
    pub int_partials: Option<Vec<IntMatrix>>,
    /// Set when any accumulator left the symmetric `acc_bits` range.
    pub overflow_flag: bool,
    pub ops: OpCounts,
}

impl GemmResult {
    /// Turns a flagged overflow into an error.
    pub fn checked(self) -> Result<Self> {
        if self.overflow_flag {
            Err(Error::Overflow("accumulator exceeded its declared width".into()))
        } else {
            Ok(self)
        }
    }
}

fn check_operands(
    qa: &QuantizedActivation<'_>,
    qw: &QuantizedWeight,
    correction: &BiasCorrection,
    acc_bits: u32,
) -> Result<()> {
    if !(2..=63).contains(&acc_bits) {
        return Err(Error::BitWidth(acc_bits));
    }
    if qa.cols() != qw.rows() {
        return Err(Error::shape(format!(
            "activation has {} channels, weight has {} rows",
            qa.cols(),
            qw.rows()
        )));
    }
    if correction.rows().len() != qa.plan().chunks().len() || correction.cols() != qw.cols() {
        return Err(Error::shape("bias correction does not match plan and weight"));
    }
    Ok(())
}

/// Storage width for integer snapshots: the declared width when nothing
/// overflowed, otherwise the widest the container allows.
fn snapshot(rows: usize, cols: usize, acc_bits: u32, overflow: bool, data: Vec<i64>) -> IntMatrix {
    IntMatrix::from_vec_unchecked(rows, cols, if overflow { 63 } else { acc_bits }, data)
}

/// Operands of one chunk laid out in streaming order: each weight column
/// and the current activation row are gathered through the permutation so
/// group `g` occupies positions `boundaries[g-1]..boundaries[g]`.
struct StreamedChunk<'c> {
    chunk: &'c ChunkPlan,
    k: usize,
    /// `n × K`, column `j` contiguous.
    weight: Vec<i64>,
    row: Vec<i64>,
    /// Largest magnitude one product can have.
    max_product: i64,
}

impl<'c> StreamedChunk<'c> {
    fn new(chunk: &'c ChunkPlan, w: &IntMatrix) -> Self {
        let (k, n) = (w.rows(), w.cols());
        let perm = chunk.permutation();
        let mut weight = Vec::with_capacity(n * k);
        for j in 0..n {
            weight.extend(perm.iter().map(|&c| w.get(c, j)));
        }
        let q = qmax(w.bits());
        Self { chunk, k, weight, row: vec![0; k], max_product: q.saturating_mul(q) }
    }

    fn load_row(&mut self, a: &IntMatrix, i: usize) {
        let src = a.row(i);
        for (dst, &c) in self.row.iter_mut().zip(self.chunk.permutation()) {
            *dst = src[c];
        }
    }

    /// Adds group `g` of the loaded row times column `j` onto `acc`, flagging
    /// any intermediate value outside `acc_bits`.
    #[inline]
    fn group_mac(&self, mut acc: i64, g: usize, j: usize, acc_bits: u32, overflow: &mut bool) -> Result<i64> {
        let span = self.chunk.boundaries()[g - 1]..self.chunk.boundaries()[g];
        let col = &self.weight[j * self.k..(j + 1) * self.k];
        let bound = (span.len() as i64).saturating_mul(self.max_product);
        if acc.unsigned_abs().saturating_add(bound.unsigned_abs()) <= qmax(acc_bits) as u64 {
            // no prefix of this group can leave the register
            let dot: i64 = self.row[span.clone()].iter().zip(&col[span]).map(|(a, w)| a * w).sum();
            return Ok(acc + dot);
        }
        for (&a, &w) in self.row[span.clone()].iter().zip(&col[span]) {
            acc = a
                .checked_mul(w)
                .and_then(|p| acc.checked_add(p))
                .ok_or_else(|| Error::Overflow("i64 accumulator".into()))?;
            *overflow |= !fits(acc, acc_bits);
        }
        Ok(acc)
    }
}

/// Per-group dequantize-and-add (`Y = Σ_g s_g · s_w · P_g + bias·W`).
pub fn gemm_explicit(
    qa: &QuantizedActivation<'_>,
    qw: &QuantizedWeight,
    correction: &BiasCorrection,
    acc_bits: u32,
) -> Result<GemmResult> {
    check_operands(qa, qw, correction, acc_bits)?;
    let plan = qa.plan();
    let (m, n, groups) = (qa.rows(), qw.cols(), plan.groups());
    let (a, sw) = (qa.data(), qw.col_scales());

    let mut partials = vec![vec![0i64; m * n]; groups];
    let mut out = vec![0.0; m * n];
    let mut overflow = false;
    let mut ops = OpCounts::default();

    for (ci, chunk, rows) in qa.chunk_spans() {
        let corr = correction.chunk(ci);
        let mut stream = StreamedChunk::new(chunk, qw.data());
        for i in rows {
            stream.load_row(a, i);
            for j in 0..n {
                let mut y = 0.0;
                for g in 1..=groups {
                    let p = stream.group_mac(0, g, j, acc_bits, &mut overflow)?;
                    ops.macs += chunk.group_channels(g).len() as u64;
                    partials[g - 1][i * n + j] = p;
                    y += (chunk.ladder().scale(g) * sw[j]) * p as f64;
                }
                out[i * n + j] = y + corr[j];
                ops.reduction_passes += groups as u64;
                ops.float_ops += 3 * groups as u64 + 1;
            }
        }
    }
    Ok(GemmResult {
        output: FloatMatrix::from_vec_unchecked(m, n, out),
        accumulators: None,
        int_partials: Some(
            partials.into_iter().map(|p| snapshot(m, n, acc_bits, overflow, p)).collect(),
        ),
        overflow_flag: overflow,
        ops,
    })
}

/// Single-accumulator runtime requantization (`A_{g+1} = α·A_g + P_{g+1}`,
/// `Y = A_G · s_G · s_w + bias·W`).
pub fn gemm_implicit(
    qa: &QuantizedActivation<'_>,
    qw: &QuantizedWeight,
    correction: &BiasCorrection,
    acc_bits: u32,
) -> Result<GemmResult> {
    let order: Vec<usize> = (1..=qa.plan().groups()).collect();
    implicit_in_order(qa, qw, correction, acc_bits, &order)
}

/// Implicit path with an arbitrary group order; the final dequantization
/// uses the scale of the last group streamed. Only ascending order is
/// correct.
pub(crate) fn implicit_in_order(
    qa: &QuantizedActivation<'_>,
    qw: &QuantizedWeight,
    correction: &BiasCorrection,
    acc_bits: u32,
    order: &[usize],
) -> Result<GemmResult> {
    check_operands(qa, qw, correction, acc_bits)?;
    let plan = qa.plan();
    let (m, n) = (qa.rows(), qw.cols());
    let alpha = plan.alpha() as i64;
    let (a, sw) = (qa.data(), qw.col_scales());
    let last = *order.last().expect("at least one group");

    let mut accs = vec![0i64; m * n];
    let mut out = vec![0.0; m * n];
    let mut overflow = false;
    let mut ops = OpCounts::default();

    for (ci, chunk, rows) in qa.chunk_spans() {
        let corr = correction.chunk(ci);
        let final_scale = chunk.ladder().scale(last);
        let mut stream = StreamedChunk::new(chunk, qw.data());
        for i in rows {
            stream.load_row(a, i);
            for j in 0..n {
                let mut acc = 0i64;
                for (step, &g) in order.iter().enumerate() {
                    if step > 0 {
                        acc = acc
                            .checked_mul(alpha)
                            .ok_or_else(|| Error::Overflow("i64 accumulator".into()))?;
                        overflow |= !fits(acc, acc_bits);
                        ops.rescales += 1;
                    }
                    acc = stream.group_mac(acc, g, j, acc_bits, &mut overflow)?;
                    ops.macs += chunk.group_channels(g).len() as u64;
                }
                accs[i * n + j] = acc;
                out[i * n + j] = acc as f64 * (final_scale * sw[j]) + corr[j];
                ops.reduction_passes += 1;
                ops.float_ops += 3;
            }
        }
    }
    Ok(GemmResult {
        output: FloatMatrix::from_vec_unchecked(m, n, out),
        accumulators: Some(snapshot(m, n, acc_bits, overflow, accs)),
        int_partials: None,
        overflow_flag: overflow,
        ops,
    })
}

/// Float product of the unquantized operands.
pub fn gemm_reference(x: &FloatMatrix, w: &FloatMatrix) -> Result<FloatMatrix> {
    matmul_float(x, w)
}

/// Where [`compare_paths`] gets its plan.
#[derive(Debug, Clone, Copy)]
pub enum PlanSource<'a> {
    /// Calibrate on the activation being multiplied.
    SelfCalibrate(PlanConfig),
    Provided(&'a DecompositionPlan),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathComparison {
    pub reference: ErrorMetrics,
    pub explicit: ErrorMetrics,
    pub implicit: ErrorMetrics,
    pub overflow: bool,
}

/// Runs the float, explicit and implicit paths and measures each against
/// the float product.
pub fn compare_paths(
    x: &FloatMatrix,
    w: &FloatMatrix,
    source: PlanSource<'_>,
    acc_bits: u32,
) -> Result<PathComparison> {
    let owned;
    let plan = match source {
        PlanSource::SelfCalibrate(cfg) => {
            owned = self_calibrate(x, cfg)?;
            &owned
        }
        PlanSource::Provided(p) => p,
    };
    let reference = gemm_reference(x, w)?;
    let qa = quantize_activation(x, plan)?;
    let qw = quantize_weight(w, plan.bits())?;
    let corr = bias_correction(plan, w)?;
    let explicit = gemm_explicit(&qa, &qw, &corr, acc_bits)?;
    let implicit = gemm_implicit(&qa, &qw, &corr, acc_bits)?;
    Ok(PathComparison {
        reference: error_metrics(&reference, &reference)?,
        explicit: error_metrics(&reference, &explicit.output)?,
        implicit: error_metrics(&reference, &implicit.output)?,
        overflow: explicit.overflow_flag || implicit.overflow_flag,
    })
}
