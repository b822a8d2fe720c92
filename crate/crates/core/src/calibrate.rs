//! Offline calibration: channel biases, power-of-α scale ladders, channel
//! groups and the channel streaming order, computed independently for each
//! chunk of token rows.
//!
//! A channel with centered absolute maximum `cmax` lands in the smallest
//! group `g` with `tmax / α^g < cmax <= tmax / α^(g-1)`. Channels below the
//! last boundary (including all-zero channels) fall into group `G`, which
//! has the finest scale. Group `g` uses scale `tmax / (α^(g-1) · qmax(b))`,
//! so adjacent scales differ by exactly `α` and an integer accumulator can
//! move from one group's scale to the next by a multiply (a shift for α=2).

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{
    check_quant_bits, qmax, quantize_symmetric, round_clamp, FloatMatrix,
    Granularity, IntMatrix,
};

pub const DEFAULT_CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanConfig {
    pub bits: u32,
    pub alpha: u32,
    pub groups: usize,
    pub chunk_rows: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { bits: 8, alpha: 2, groups: 8, chunk_rows: DEFAULT_CHUNK_ROWS }
    }
}

impl PlanConfig {
    pub fn new(bits: u32, alpha: u32, groups: usize, chunk_rows: usize) -> Self {
        Self { bits, alpha, groups, chunk_rows }
    }

    pub fn validate(&self) -> Result<()> {
        check_quant_bits(self.bits)?;
        validate_ladder_shape(self.alpha, self.groups)?;
        if self.chunk_rows == 0 {
            return Err(Error::config("chunk_rows must be at least 1"));
        }
        Ok(())
    }
}

fn validate_ladder_shape(alpha: u32, groups: usize) -> Result<()> {
    if alpha < 2 {
        return Err(Error::config(format!("alpha must be an integer >= 2, got {alpha}")));
    }
    if groups == 0 {
        return Err(Error::config("at least one group is required"));
    }
    // α^G must stay exact in an f64 mantissa so every boundary is exact.
    let exact = (alpha as u64)
        .checked_pow(groups as u32)
        .is_some_and(|p| p <= 1u64 << 53);
    if !exact {
        return Err(Error::config(format!("alpha^G too large (alpha={alpha}, G={groups})")));
    }
    Ok(())
}

/// Thresholds and scales for one row chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLadder {
    tmax: f64,
    alpha: u32,
    groups: usize,
    bits: u32,
    scales: Vec<f64>,
}

pub fn build_ladder(tmax: f64, alpha: u32, groups: usize, bits: u32) -> Result<GroupLadder> {
    GroupLadder::new(tmax, alpha, groups, bits)
}

impl GroupLadder {
    pub fn new(tmax: f64, alpha: u32, groups: usize, bits: u32) -> Result<Self> {
        check_quant_bits(bits)?;
        validate_ladder_shape(alpha, groups)?;
        if !tmax.is_finite() || tmax < 0.0 {
            return Err(Error::config(format!("tmax must be finite and >= 0, got {tmax}")));
        }
        let k = qmax(bits) as u64;
        let scales = (0..groups)
            .map(|g| {
                if tmax == 0.0 {
                    1.0
                } else {
                    tmax / ((alpha as u64).pow(g as u32) * k) as f64
                }
            })
            .collect();
        Ok(Self { tmax, alpha, groups, bits, scales })
    }

    pub fn tmax(&self) -> f64 {
        self.tmax
    }

    pub fn alpha(&self) -> u32 {
        self.alpha
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Scale of group `g` (1-based).
    pub fn scale(&self, g: usize) -> f64 {
        self.scales[g - 1]
    }

    /// `tmax / α^g`: the exclusive lower threshold of group `g`.
    pub fn lower_bound(&self, g: usize) -> f64 {
        self.tmax / (self.alpha as u64).pow(g as u32) as f64
    }

    /// `tmax / α^(g-1)`: the inclusive upper threshold of group `g`.
    pub fn upper_bound(&self, g: usize) -> f64 {
        self.lower_bound(g - 1)
    }

    pub fn classify(&self, cmax: f64) -> Result<usize> {
        if cmax > self.tmax || cmax.is_nan() || cmax < 0.0 {
            return Err(Error::ChannelAboveTensorMax { cmax, tmax: self.tmax });
        }
        Ok((1..=self.groups).find(|&g| cmax > self.lower_bound(g)).unwrap_or(self.groups))
    }
}

pub fn classify_channel(cmax: f64, ladder: &GroupLadder) -> Result<usize> {
    ladder.classify(cmax)
}

/// Calibration metadata for one contiguous block of token rows.
///
/// `permutation` is the streaming order of channels (group-ascending, stable
/// within a group) and `boundaries[g-1]..boundaries[g]` is the slice of it
/// holding group `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPlan {
    pub(crate) row_range: Range<usize>,
    pub(crate) bias: Vec<f64>,
    pub(crate) cmax: Vec<f64>,
    pub(crate) ladder: GroupLadder,
    pub(crate) group_of: Vec<usize>,
    pub(crate) permutation: Vec<usize>,
    pub(crate) boundaries: Vec<usize>,
}

impl ChunkPlan {
    /// Derives groups, ordering and boundaries from per-channel statistics.
    pub fn from_stats(
        row_range: Range<usize>,
        bias: Vec<f64>,
        cmax: Vec<f64>,
        alpha: u32,
        groups: usize,
        bits: u32,
    ) -> Result<Self> {
        if bias.len() != cmax.len() {
            return Err(Error::shape("bias and cmax lengths differ"));
        }
        if let Some(v) = bias.iter().chain(&cmax).find(|v| !v.is_finite()) {
            return Err(Error::format(format!("non-finite calibration statistic {v}")));
        }
        let tmax = cmax.iter().copied().fold(0.0, f64::max);
        let ladder = GroupLadder::new(tmax, alpha, groups, bits)?;
        let group_of = cmax.iter().map(|&c| ladder.classify(c)).collect::<Result<Vec<_>>>()?;
        let mut permutation: Vec<usize> = (0..cmax.len()).collect();
        permutation.sort_by_key(|&j| group_of[j]);
        let mut boundaries = vec![0usize; groups + 1];
        for &g in &group_of {
            boundaries[g] += 1;
        }
        for g in 1..=groups {
            boundaries[g] += boundaries[g - 1];
        }
        Ok(Self { row_range, bias, cmax, ladder, group_of, permutation, boundaries })
    }

    pub fn row_range(&self) -> Range<usize> {
        self.row_range.clone()
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn cmax(&self) -> &[f64] {
        &self.cmax
    }

    pub fn ladder(&self) -> &GroupLadder {
        &self.ladder
    }

    /// 1-based group of each channel, in original channel order.
    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Channels of group `g` (1-based) in streaming order.
    pub fn group_channels(&self, g: usize) -> &[usize] {
        &self.permutation[self.boundaries[g - 1]..self.boundaries[g]]
    }

    pub fn channel_scale(&self, channel: usize) -> f64 {
        self.ladder.scale(self.group_of[channel])
    }

    /// Whether the channel sits below the last group's lower threshold and
    /// was placed in group `G` by default.
    pub fn is_clamped(&self, channel: usize) -> bool {
        let g = self.ladder.groups();
        self.group_of[channel] == g && self.cmax[channel] <= self.ladder.lower_bound(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionPlan {
    pub(crate) cols: usize,
    pub(crate) config: PlanConfig,
    pub(crate) chunks: Vec<ChunkPlan>,
}

impl DecompositionPlan {
    /// Assembles a plan from chunk plans, checking that they tile the rows
    /// and agree with the configuration.
    pub fn from_chunks(config: PlanConfig, chunks: Vec<ChunkPlan>) -> Result<Self> {
        config.validate()?;
        let cols = chunks.first().map_or(0, |c| c.bias.len());
        let mut next = 0;
        for (i, c) in chunks.iter().enumerate() {
            if c.row_range.start != next || c.row_range.end <= c.row_range.start {
                return Err(Error::format(format!("chunk {i} does not continue the row tiling")));
            }
            if c.row_range.len() > config.chunk_rows
                || (i + 1 < chunks.len() && c.row_range.len() != config.chunk_rows)
            {
                return Err(Error::format(format!("chunk {i} has the wrong number of rows")));
            }
            if c.bias.len() != cols {
                return Err(Error::format(format!("chunk {i} has a different channel count")));
            }
            let l = &c.ladder;
            if (l.alpha, l.groups, l.bits) != (config.alpha, config.groups, config.bits) {
                return Err(Error::format(format!("chunk {i} ladder disagrees with the plan")));
            }
            next = c.row_range.end;
        }
        if chunks.is_empty() {
            return Err(Error::format("plan has no chunks"));
        }
        Ok(Self { cols, config, chunks })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn config(&self) -> PlanConfig {
        self.config
    }

    pub fn bits(&self) -> u32 {
        self.config.bits
    }

    pub fn alpha(&self) -> u32 {
        self.config.alpha
    }

    pub fn groups(&self) -> usize {
        self.config.groups
    }

    pub fn chunk_rows(&self) -> usize {
        self.config.chunk_rows
    }

    pub fn chunks(&self) -> &[ChunkPlan] {
        &self.chunks
    }

    /// Number of token rows the plan has calibration data for.
    pub fn covered_rows(&self) -> usize {
        self.chunks.last().map_or(0, |c| c.row_range.end)
    }

    pub fn chunk_index(&self, row: usize) -> usize {
        row / self.config.chunk_rows
    }

    pub fn chunk_for_row(&self, row: usize) -> &ChunkPlan {
        &self.chunks[self.chunk_index(row)]
    }
}

/// Calibrates a plan from one or more sample activations.
///
/// Chunk `c` covers rows `c·chunk_rows ..` of every sample long enough to
/// reach them. Biases come from the per-channel min/max over all those
/// rows; `cmax` is the absolute maximum after subtracting the bias.
pub fn build_plan(samples: &[FloatMatrix], config: PlanConfig) -> Result<DecompositionPlan> {
    config.validate()?;
    let first = samples.first().ok_or_else(|| Error::shape("no calibration samples"))?;
    let cols = first.cols();
    if let Some(s) = samples.iter().find(|s| s.cols() != cols) {
        return Err(Error::shape(format!(
            "calibration samples disagree on channels: {} vs {}",
            cols,
            s.cols()
        )));
    }
    let max_rows = samples.iter().map(FloatMatrix::rows).max().unwrap_or(0);
    if max_rows == 0 {
        return Err(Error::shape("calibration samples have no rows"));
    }
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < max_rows {
        let end = (start + config.chunk_rows).min(max_rows);
        let rows_of = |s: &FloatMatrix| start.min(s.rows())..end.min(s.rows());

        let mut lo = vec![f64::INFINITY; cols];
        let mut hi = vec![f64::NEG_INFINITY; cols];
        for s in samples {
            for i in rows_of(s) {
                for (j, &v) in s.row(i).iter().enumerate() {
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
        }
        let bias: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| (h + l) / 2.0).collect();
        let mut cmax = vec![0.0f64; cols];
        for s in samples {
            for i in rows_of(s) {
                for (j, &v) in s.row(i).iter().enumerate() {
                    cmax[j] = cmax[j].max((v - bias[j]).abs());
                }
            }
        }
        chunks.push(ChunkPlan::from_stats(
            start..end,
            bias,
            cmax,
            config.alpha,
            config.groups,
            config.bits,
        )?);
        start = end;
    }
    DecompositionPlan::from_chunks(config, chunks)
}

/// Integer activations in original channel order, tied to the plan that
/// produced them.
#[derive(Debug, Clone)]
pub struct QuantizedActivation<'p> {
    data: IntMatrix,
    plan: &'p DecompositionPlan,
}

impl<'p> QuantizedActivation<'p> {
    /// Wraps already-quantized integers; they must use the plan's bit width
    /// and channel count and stay within its covered rows.
    pub fn from_parts(data: IntMatrix, plan: &'p DecompositionPlan) -> Result<Self> {
        if data.bits() != plan.bits() || data.cols() != plan.cols || data.rows() > plan.covered_rows() {
            return Err(Error::shape("integer activation does not match the plan"));
        }
        Ok(Self { data, plan })
    }

    pub fn data(&self) -> &IntMatrix {
        &self.data
    }

    pub fn plan(&self) -> &'p DecompositionPlan {
        self.plan
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn cols(&self) -> usize {
        self.data.cols()
    }

    /// Chunks overlapping this activation, with the row range each one
    /// covers (the last may be truncated).
    pub fn chunk_spans(&self) -> impl Iterator<Item = (usize, &'p ChunkPlan, Range<usize>)> + '_ {
        let rows = self.rows();
        self.plan
            .chunks
            .iter()
            .enumerate()
            .take_while(move |(_, c)| c.row_range.start < rows)
            .map(move |(i, c)| (i, c, c.row_range.start..c.row_range.end.min(rows)))
    }

    /// Back to float, bias included.
    pub fn dequantize(&self) -> FloatMatrix {
        FloatMatrix::from_fn(self.rows(), self.cols(), |i, j| {
            let chunk = self.plan.chunk_for_row(i);
            self.data.get(i, j) as f64 * chunk.channel_scale(j) + chunk.bias[j]
        })
    }
}

pub fn quantize_activation<'p>(
    x: &FloatMatrix,
    plan: &'p DecompositionPlan,
) -> Result<QuantizedActivation<'p>> {
    if x.cols() != plan.cols {
        return Err(Error::shape(format!(
            "activation has {} channels, plan has {}",
            x.cols(),
            plan.cols
        )));
    }
    if x.rows() > plan.covered_rows() {
        return Err(Error::shape(format!(
            "activation has {} rows, plan covers {}",
            x.rows(),
            plan.covered_rows()
        )));
    }
    let bits = plan.bits();
    let mut data = Vec::with_capacity(x.rows() * x.cols());
    for i in 0..x.rows() {
        let chunk = plan.chunk_for_row(i);
        for (j, &v) in x.row(i).iter().enumerate() {
            data.push(round_clamp((v - chunk.bias[j]) / chunk.channel_scale(j), bits));
        }
    }
    Ok(QuantizedActivation {
        data: IntMatrix::from_vec_unchecked(x.rows(), x.cols(), bits, data),
        plan,
    })
}

/// Weight matrix (K×N) quantized with one symmetric scale per output column.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeight {
    data: IntMatrix,
    col_scales: Vec<f64>,
}

impl QuantizedWeight {
    pub fn from_parts(data: IntMatrix, col_scales: Vec<f64>) -> Result<Self> {
        if col_scales.len() != data.cols() {
            return Err(Error::shape("one scale per weight column is required"));
        }
        if col_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("weight scales must be positive and finite"));
        }
        Ok(Self { data, col_scales })
    }

    pub fn data(&self) -> &IntMatrix {
        &self.data
    }

    pub fn col_scales(&self) -> &[f64] {
        &self.col_scales
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn cols(&self) -> usize {
        self.data.cols()
    }

    pub fn dequantize(&self) -> FloatMatrix {
        FloatMatrix::from_fn(self.rows(), self.cols(), |i, j| {
            self.data.get(i, j) as f64 * self.col_scales[j]
        })
    }
}

pub fn quantize_weight(w: &FloatMatrix, bits: u32) -> Result<QuantizedWeight> {
    let (data, params) = quantize_symmetric(w, bits, Granularity::PerColumn)?;
    Ok(QuantizedWeight { data, col_scales: params.scales })
}

/// Per-chunk `bias · W` row vectors, added back to each chunk's output rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasCorrection {
    rows: Vec<FloatMatrix>,
}

impl BiasCorrection {
    /// The 1×N correction for chunk `chunk`.
    pub fn chunk(&self, chunk: usize) -> &[f64] {
        self.rows[chunk].data()
    }

    pub fn rows(&self) -> &[FloatMatrix] {
        &self.rows
    }

    pub fn cols(&self) -> usize {
        self.rows.first().map_or(0, FloatMatrix::cols)
    }
}

pub fn bias_correction(plan: &DecompositionPlan, w: &FloatMatrix) -> Result<BiasCorrection> {
    if w.rows() != plan.cols {
        return Err(Error::shape(format!(
            "weight has {} rows, plan has {} channels",
            w.rows(),
            plan.cols
        )));
    }
    let rows = plan
        .chunks
        .iter()
        .map(|c| {
            let mut out = vec![0.0; w.cols()];
            for (k, &b) in c.bias.iter().enumerate() {
                if b != 0.0 {
                    for (o, wv) in out.iter_mut().zip(w.row(k)) {
                        *o += b * wv;
                    }
                }
            }
            FloatMatrix::from_vec_unchecked(1, w.cols(), out)
        })
        .collect();
    Ok(BiasCorrection { rows })
}

/// Builds a plan from the activation itself.
pub fn self_calibrate(x: &FloatMatrix, config: PlanConfig) -> Result<DecompositionPlan> {
    build_plan(std::slice::from_ref(x), config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_from_walking_example() {
        let l = build_ladder(22.4, 2, 3, 8).unwrap();
        assert_eq!(l.scales(), &[22.4 / 127.0, 11.2 / 127.0, 5.6 / 127.0]);
        assert_eq!(l.lower_bound(1), 11.2);
        assert_eq!(l.lower_bound(2), 5.6);
    }

    #[test]
    fn ladder_degenerate_cases() {
        let l = build_ladder(3.5, 2, 1, 4).unwrap();
        assert_eq!(l.scales(), &[3.5 / 7.0]);
        let l = build_ladder(0.0, 2, 4, 8).unwrap();
        assert_eq!(l.scales(), &[1.0; 4]);
        assert_eq!(l.classify(0.0).unwrap(), 4);
    }

    #[test]
    fn ladder_rejects_bad_parameters() {
        assert!(matches!(build_ladder(1.0, 1, 3, 8), Err(Error::Config(_))));
        assert!(matches!(build_ladder(1.0, 2, 0, 8), Err(Error::Config(_))));
        assert!(matches!(build_ladder(1.0, 2, 3, 7), Err(Error::BitWidth(7))));
        assert!(matches!(build_ladder(-1.0, 2, 3, 8), Err(Error::Config(_))));
        assert!(matches!(build_ladder(1.0, 2, 60, 8), Err(Error::Config(_))));
    }

    #[test]
    fn classify_examples() {
        let l = build_ladder(22.4, 2, 3, 8).unwrap();
        assert_eq!(l.classify(22.4).unwrap(), 1);
        assert_eq!(l.classify(9.0).unwrap(), 2);
        assert_eq!(l.classify(11.2).unwrap(), 2);
        assert_eq!(l.classify(5.6).unwrap(), 3);
        assert_eq!(l.classify(1.0).unwrap(), 3);
        assert_eq!(l.classify(0.0).unwrap(), 3);
        assert!(matches!(l.classify(22.5), Err(Error::ChannelAboveTensorMax { .. })));
    }

    #[test]
    fn chunk_plan_orders_channels_stably() {
        let c = ChunkPlan::from_stats(0..4, vec![0.0; 5], vec![1.0, 8.0, 3.0, 8.0, 0.0], 2, 3, 8)
            .unwrap();
        assert_eq!(c.group_of(), &[3, 1, 2, 1, 3]);
        assert_eq!(c.permutation(), &[1, 3, 2, 0, 4]);
        assert_eq!(c.boundaries(), &[0, 2, 3, 5]);
        assert_eq!(c.group_channels(2), &[2]);
        assert!(c.is_clamped(0) && c.is_clamped(4) && !c.is_clamped(2));
    }

    #[test]
    fn build_plan_rejects_bad_samples() {
        let cfg = PlanConfig::default();
        assert!(matches!(build_plan(&[], cfg), Err(Error::Shape(_))));
        let a = FloatMatrix::zeros(2, 3);
        let b = FloatMatrix::zeros(2, 4);
        assert!(matches!(build_plan(&[a, b], cfg), Err(Error::Shape(_))));
        assert!(matches!(
            build_plan(&[FloatMatrix::zeros(2, 2)], PlanConfig { chunk_rows: 0, ..cfg }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn short_samples_contribute_to_overlapping_chunk() {
        let long = FloatMatrix::from_fn(5, 1, |i, _| i as f64);
        let short = FloatMatrix::new(3, 1, vec![0.0, 0.0, 10.0]).unwrap();
        let plan = build_plan(&[long, short], PlanConfig::new(8, 2, 2, 2)).unwrap();
        let ranges: Vec<_> = plan.chunks().iter().map(ChunkPlan::row_range).collect();
        assert_eq!(ranges, vec![0..2, 2..4, 4..5]);
        assert_eq!(plan.chunks()[1].bias(), &[6.0]);
        assert_eq!(plan.chunks()[2].bias(), &[4.0]);
    }

    #[test]
    fn quantize_activation_edge_cases() {
        let x = FloatMatrix::new(2, 2, vec![1.0, -3.0, 5.0, 3.0]).unwrap();
        let plan = build_plan(std::slice::from_ref(&x), PlanConfig::new(8, 2, 2, 256)).unwrap();
        assert_eq!(plan.chunks()[0].bias(), &[3.0, 0.0]);

        let bias_rows = FloatMatrix::new(2, 2, vec![3.0, 0.0, 3.0, 0.0]).unwrap();
        let q = quantize_activation(&bias_rows, &plan).unwrap();
        assert!(q.data().data().iter().all(|&v| v == 0));

        let spike = FloatMatrix::new(1, 2, vec![3.0 + 10.0 * 3.0, -30.0]).unwrap();
        let q = quantize_activation(&spike, &plan).unwrap();
        assert_eq!(q.data().data(), &[127, -127]);

        assert!(quantize_activation(&FloatMatrix::zeros(1, 3), &plan).is_err());
        assert!(quantize_activation(&FloatMatrix::zeros(3, 2), &plan).is_err());
    }

    #[test]
    fn quantize_weight_examples() {
        let qw = quantize_weight(&FloatMatrix::identity(3), 8).unwrap();
        assert_eq!(qw.data().data(), &[127, 0, 0, 0, 127, 0, 0, 0, 127]);
        assert_eq!(qw.col_scales(), &[1.0 / 127.0; 3]);

        let w = FloatMatrix::new(2, 2, vec![0.0, 1.0, 0.0, -2.0]).unwrap();
        let qw = quantize_weight(&w, 4).unwrap();
        assert_eq!(qw.col_scales()[0], 1.0);
        assert_eq!(qw.data().get(0, 0), 0);
        assert_eq!(qw.data().get(1, 1), -7);
    }

    #[test]
    fn bias_correction_examples() {
        let w = FloatMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 + 0.5);
        let zero = build_plan(&[FloatMatrix::from_fn(4, 3, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 })], PlanConfig::default()).unwrap();
        let c = bias_correction(&zero, &w).unwrap();
        assert_eq!(c.chunk(0), &[0.0, 0.0]);

        // column 1 constant at 1, others symmetric: bias = e_1
        let x = FloatMatrix::from_fn(4, 3, |i, j| match (i % 2, j) {
            (_, 1) => 1.0,
            (0, _) => 2.0,
            _ => -2.0,
        });
        let plan = build_plan(&[x], PlanConfig::default()).unwrap();
        let c = bias_correction(&plan, &w).unwrap();
        assert_eq!(c.chunk(0), w.row(1));

        assert!(bias_correction(&plan, &FloatMatrix::zeros(2, 2)).is_err());
    }
}
