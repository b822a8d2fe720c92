//! Cycle-level model of an output-stationary systolic array whose PEs can
//! shift their accumulator left by one bit on a rescale signal.
//!
//! Each tile pass maps a block of output elements onto the PE grid, one per
//! PE. Activation rows enter from the left and weight columns from the top,
//! skewed so that slot `s` of the stream reaches PE `(r, c)` at local cycle
//! `s + r + c`. The stream is the chunk's channels in group order with one
//! bubble slot between consecutive groups; the bubble carries the rescale
//! flag along the PE row with the activation wavefront, so every PE shifts
//! exactly between its last MAC of one group and its first MAC of the next.
//!
//! Timing per pass: `(R-1) + (C-1)` fill cycles, one cycle per stream slot
//! (`K + G - 1`), then `C` drain cycles writing one accumulator column per
//! cycle. Passes do not overlap. Operands are always ready.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calibrate::{BiasCorrection, ChunkPlan, QuantizedActivation, QuantizedWeight};
use crate::error::{Error, Result};
use crate::tensor::{fits, FloatMatrix, IntMatrix};

pub const TIMING_MODEL: &str =
    "per tile pass: fill (R-1)+(C-1), one cycle per stream slot, drain C; passes not overlapped";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsaConfig {
    pub pe_rows: usize,
    pub pe_cols: usize,
    /// Native multiplier width of one PE (4 or 8).
    pub pe_bits: u32,
    pub acc_bits: u32,
    /// With 4-bit PEs and 8-bit operands, treat each 2×2 block of PEs as one
    /// 8-bit PE.
    pub int8_grouping: bool,
    /// Vector lanes available to the explicit path for dequantize-and-add.
    pub vector_lanes: usize,
    pub trace: bool,
}

impl Default for MsaConfig {
    fn default() -> Self {
        Self {
            pe_rows: 64,
            pe_cols: 64,
            pe_bits: 4,
            acc_bits: 32,
            int8_grouping: true,
            vector_lanes: 64,
            trace: false,
        }
    }
}

impl MsaConfig {
    pub fn with_dims(pe_rows: usize, pe_cols: usize) -> Self {
        Self { pe_rows, pe_cols, ..Self::default() }
    }

    /// Array dimensions seen by operands of `operand_bits`.
    pub fn effective_dims(&self, operand_bits: u32) -> Result<(usize, usize)> {
        if self.pe_rows == 0 || self.pe_cols == 0 {
            return Err(Error::config("PE grid must be at least 1x1"));
        }
        if !matches!(self.pe_bits, 4 | 8) {
            return Err(Error::config(format!("PE width must be 4 or 8 bits, got {}", self.pe_bits)));
        }
        if !(2..=63).contains(&self.acc_bits) {
            return Err(Error::BitWidth(self.acc_bits));
        }
        if self.vector_lanes == 0 {
            return Err(Error::config("vector_lanes must be at least 1"));
        }
        if operand_bits <= self.pe_bits {
            Ok((self.pe_rows, self.pe_cols))
        } else if operand_bits == 8 && self.pe_bits == 4 && self.int8_grouping {
            if self.pe_rows < 2 || self.pe_cols < 2 {
                return Err(Error::config("8-bit grouping needs at least a 2x2 PE grid"));
            }
            Ok((self.pe_rows / 2, self.pe_cols / 2))
        } else {
            Err(Error::config(format!(
                "{operand_bits}-bit operands do not fit {}-bit PEs",
                self.pe_bits
            )))
        }
    }
}

/// One position in a PE stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Channel(usize),
    Rescale,
}

/// Channel streaming order for one chunk plus where the groups split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamSchedule {
    pub order: Vec<usize>,
    pub boundaries: Vec<usize>,
    pub alpha: u32,
}

impl StreamSchedule {
    pub fn from_chunk(chunk: &ChunkPlan) -> Self {
        Self {
            order: chunk.permutation().to_vec(),
            boundaries: chunk.boundaries().to_vec(),
            alpha: chunk.ladder().alpha(),
        }
    }

    pub fn groups(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.order[self.boundaries[g - 1]..self.boundaries[g]]
    }

    /// Channels in order with a rescale bubble between consecutive groups
    /// (empty groups included), `K + G - 1` slots in total.
    pub fn slots(&self) -> Vec<Slot> {
        let mut slots = Vec::with_capacity(self.order.len() + self.groups() - 1);
        for g in 1..=self.groups() {
            if g > 1 {
                slots.push(Slot::Rescale);
            }
            slots.extend(self.group(g).iter().map(|&k| Slot::Channel(k)));
        }
        slots
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Mac,
    Rescale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub cycle: u64,
    pub pe_row: usize,
    pub pe_col: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataflow {
    /// One pass per tile with in-array rescaling.
    Implicit,
    /// One pass per tile and group, partials combined in float.
    Explicit,
}

#[derive(Debug, Clone)]
pub struct SimReport {
    pub dataflow: Dataflow,
    pub config: MsaConfig,
    pub effective_rows: usize,
    pub effective_cols: usize,
    /// Final accumulators per output element (implicit dataflow).
    pub accumulators: Option<IntMatrix>,
    /// Per-group partial accumulators (explicit dataflow).
    pub group_partials: Vec<IntMatrix>,
    pub output: FloatMatrix,
    pub total_cycles: u64,
    pub bubble_cycles: u64,
    pub dequant_cycles: u64,
    pub tile_passes: u64,
    pub mac_events: u64,
    /// Row-major `effective_rows × effective_cols` counts.
    pub rescale_events_per_pe: Vec<u64>,
    pub utilization: f64,
    pub overflow_flag: bool,
    pub warnings: Vec<String>,
    pub trace: Option<Vec<SimEvent>>,
}

/// The serializable part of a [`SimReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub dataflow: Dataflow,
    pub config: MsaConfig,
    pub effective_rows: usize,
    pub effective_cols: usize,
    pub total_cycles: u64,
    pub bubble_cycles: u64,
    pub dequant_cycles: u64,
    pub tile_passes: u64,
    pub mac_events: u64,
    pub rescale_events_per_pe_min: u64,
    pub rescale_events_per_pe_max: u64,
    pub utilization: f64,
    pub overflow_flag: bool,
    pub timing_model: String,
    pub warnings: Vec<String>,
}

impl SimReport {
    pub fn summary(&self) -> SimSummary {
        SimSummary {
            dataflow: self.dataflow,
            config: self.config,
            effective_rows: self.effective_rows,
            effective_cols: self.effective_cols,
            total_cycles: self.total_cycles,
            bubble_cycles: self.bubble_cycles,
            dequant_cycles: self.dequant_cycles,
            tile_passes: self.tile_passes,
            mac_events: self.mac_events,
            rescale_events_per_pe_min: self.rescale_events_per_pe.iter().copied().min().unwrap_or(0),
            rescale_events_per_pe_max: self.rescale_events_per_pe.iter().copied().max().unwrap_or(0),
            utilization: self.utilization,
            overflow_flag: self.overflow_flag,
            timing_model: TIMING_MODEL.to_string(),
            warnings: self.warnings.clone(),
        }
    }

    pub fn checked(self) -> Result<Self> {
        if self.overflow_flag {
            Err(Error::Overflow(format!("accumulator exceeded {} bits", self.config.acc_bits)))
        } else {
            Ok(self)
        }
    }
}

/// Rescale events in cycle order; fails unless the run was traced.
pub fn trace_rescale_events(report: &SimReport) -> Result<Vec<SimEvent>> {
    let trace = report.trace.as_ref().ok_or(Error::TracingDisabled)?;
    Ok(trace.iter().filter(|e| e.kind == EventKind::Rescale).copied().collect())
}

/// Writes `cycle,pe_row,pe_col,event` rows.
pub fn write_trace_csv(events: &[SimEvent], mut out: impl Write) -> Result<()> {
    let mut buf = String::from("cycle,pe_row,pe_col,event\n");
    for e in events {
        let kind = match e.kind {
            EventKind::Mac => "mac",
            EventKind::Rescale => "rescale",
        };
        writeln!(buf, "{},{},{},{}", e.cycle, e.pe_row, e.pe_col, kind).unwrap();
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token {
    Idle,
    Data(i64),
    Rescale,
}

/// PE grid state plus run-wide counters.
struct Array {
    rows: usize,
    cols: usize,
    acc_bits: u32,
    acc: Vec<i64>,
    act: Vec<Token>,
    wgt: Vec<Option<i64>>,
    rescales: Vec<u64>,
    cycle: u64,
    mac_events: u64,
    overflow: bool,
    trace: Option<Vec<SimEvent>>,
}

/// Operands and placement of one tile pass.
struct Pass<'a> {
    a: &'a IntMatrix,
    w: &'a IntMatrix,
    row0: usize,
    active_rows: usize,
    col0: usize,
    active_cols: usize,
    slots: &'a [Slot],
}

impl Array {
    fn new(rows: usize, cols: usize, acc_bits: u32, trace: bool) -> Self {
        Self {
            rows,
            cols,
            acc_bits,
            acc: vec![0; rows * cols],
            act: vec![Token::Idle; rows * cols],
            wgt: vec![None; rows * cols],
            rescales: vec![0; rows * cols],
            cycle: 0,
            mac_events: 0,
            overflow: false,
            trace: trace.then(Vec::new),
        }
    }

    fn left_feed(&self, p: &Pass<'_>, r: usize, t: usize) -> Token {
        match t.checked_sub(r).and_then(|s| p.slots.get(s)) {
            None => Token::Idle,
            Some(Slot::Rescale) => Token::Rescale,
            Some(&Slot::Channel(k)) => {
                Token::Data(if r < p.active_rows { p.a.get(p.row0 + r, k) } else { 0 })
            }
        }
    }

    fn top_feed(&self, p: &Pass<'_>, c: usize, t: usize) -> Option<i64> {
        match t.checked_sub(c).and_then(|s| p.slots.get(s)) {
            Some(&Slot::Channel(k)) => Some(if c < p.active_cols { p.w.get(k, p.col0 + c) } else { 0 }),
            _ => None,
        }
    }

    /// Streams one pass and returns the active accumulators row-major.
    fn run_pass(&mut self, p: &Pass<'_>) -> Result<Vec<i64>> {
        let (rows, cols) = (self.rows, self.cols);
        self.acc.fill(0);
        self.act.fill(Token::Idle);
        self.wgt.fill(None);
        let compute = p.slots.len() + rows - 1 + cols - 1;
        for t in 0..compute {
            // shift registers one hop, far end first
            for r in 0..rows {
                for c in (1..cols).rev() {
                    self.act[r * cols + c] = self.act[r * cols + c - 1];
                }
                self.act[r * cols] = self.left_feed(p, r, t);
            }
            for r in (1..rows).rev() {
                for c in 0..cols {
                    self.wgt[r * cols + c] = self.wgt[(r - 1) * cols + c];
                }
            }
            for c in 0..cols {
                self.wgt[c] = self.top_feed(p, c, t);
            }
            let cycle = self.cycle + t as u64;
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    let kind = match (self.act[i], self.wgt[i]) {
                        (Token::Idle, None) => continue,
                        (Token::Data(x), Some(y)) => {
                            self.acc[i] = x
                                .checked_mul(y)
                                .and_then(|v| self.acc[i].checked_add(v))
                                .ok_or_else(|| Error::Overflow("i64 accumulator".into()))?;
                            if r < p.active_rows && c < p.active_cols {
                                self.mac_events += 1;
                            }
                            EventKind::Mac
                        }
                        (Token::Rescale, None) => {
                            self.acc[i] = self.acc[i]
                                .checked_mul(2)
                                .ok_or_else(|| Error::Overflow("i64 accumulator".into()))?;
                            self.rescales[i] += 1;
                            EventKind::Rescale
                        }
                        (a, w) => unreachable!("skew misaligned at PE ({r}, {c}): {a:?} vs {w:?}"),
                    };
                    self.overflow |= !fits(self.acc[i], self.acc_bits);
                    if let Some(trace) = &mut self.trace {
                        trace.push(SimEvent { cycle, pe_row: r, pe_col: c, kind });
                    }
                }
            }
        }
        self.cycle += compute as u64 + cols as u64;
        let mut out = Vec::with_capacity(p.active_rows * p.active_cols);
        for r in 0..p.active_rows {
            out.extend_from_slice(&self.acc[r * cols..r * cols + p.active_cols]);
        }
        Ok(out)
    }
}

struct Prepared {
    rows: usize,
    cols: usize,
    warnings: Vec<String>,
}

fn prepare(
    qa: &QuantizedActivation<'_>,
    qw: &QuantizedWeight,
    correction: &BiasCorrection,
    cfg: &MsaConfig,
) -> Result<Prepared> {
    let plan = qa.plan();
    if plan.alpha() != 2 {
        return Err(Error::config(format!(
            "the array rescales by 1-bit shifts only; alpha must be 2, got {}",
            plan.alpha()
        )));
    }
    if qa.cols() != qw.rows() {
        return Err(Error::shape(format!(
            "activation has {} channels, weight has {} rows",
            qa.cols(),
            qw.rows()
        )));
    }
    if correction.rows().len() != plan.chunks().len() || correction.cols() != qw.cols() {
        return Err(Error::shape("bias correction does not match plan and weight"));
    }
    let bits = plan.bits().max(qw.data().bits());
    let (rows, cols) = cfg.effective_dims(bits)?;
    if plan.chunk_rows() < rows {
        return Err(Error::config(format!(
            "row chunk of {} is smaller than the {}-row array",
            plan.chunk_rows(),
            rows
        )));
    }
    let mut warnings = Vec::new();
    let k = qa.cols().max(1) as f64;
    let needed = 2 * bits + k.log2().ceil() as u32 + plan.groups() as u32 - 1;
    if cfg.acc_bits < needed {
        warnings.push(format!(
            "acc_bits {} may overflow: worst case needs {needed} bits",
            cfg.acc_bits
        ));
    }
    Ok(Prepared { rows, cols, warnings })
}

fn tiles(
    qa: &QuantizedActivation<'_>,
    n: usize,
    tile_rows: usize,
    tile_cols: usize,
) -> Vec<(usize, usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for (ci, _, span) in qa.chunk_spans() {
        for row0 in span.clone().step_by(tile_rows) {
            let active_rows = tile_rows.min(span.end - row0);
            for col0 in (0..n).step_by(tile_cols) {
                out.push((ci, row0, active_rows, col0, tile_cols.min(n - col0)));
            }
        }
    }
    out
}

fn finish(
    array: Array,
    dataflow: Dataflow,
    cfg: &MsaConfig,
    prep: Prepared,
    passes: u64,
    bubble_cycles: u64,
    dequant_cycles: u64,
) -> SimReport {
    let total_cycles = array.cycle + dequant_cycles;
    let pe_cycles = total_cycles as f64 * (prep.rows * prep.cols) as f64;
    SimReport {
        dataflow,
        config: *cfg,
        effective_rows: prep.rows,
        effective_cols: prep.cols,
        accumulators: None,
        group_partials: Vec::new(),
        output: FloatMatrix::zeros(0, 0),
        total_cycles,
        bubble_cycles,
        dequant_cycles,
        tile_passes: passes,
        mac_events: array.mac_events,
        rescale_events_per_pe: array.rescales,
        utilization: if pe_cycles > 0.0 { array.mac_events as f64 / pe_cycles } else { 0.0 },
        overflow_flag: array.overflow,
        warnings: prep.warnings,
        trace: array.trace,
    }
}

/// Runs the product with in-array rescaling. Integer accumulators match
/// [`crate::qgemm::gemm_implicit`] exactly and so does the float output.
pub fn simulate_gemm(
    qa: &QuantizedActivation<'_>,
    qw: &QuantizedWeight,
    correction: &BiasCorrection,
    cfg: &MsaConfig,
) -> Result<SimReport> {
    let prep = prepare(qa, qw, correction, cfg)?;
    let plan = qa.plan();
    let (m, n, groups) = (qa.rows(), qw.cols(), plan.groups());
    let mut array = Array::new(prep.rows, prep.cols, cfg.acc_bits, cfg.trace);
    let schedules: Vec<Vec<Slot>> =
        plan.chunks().iter().map(|c| StreamSchedule::from_chunk(c).slots()).collect();

    let mut accs = vec![0i64; m * n];
    let mut out = vec![0.0; m * n];
    let mut passes = 0u64;
    for (ci, row0, active_rows, col0, active_cols) in tiles(qa, n, prep.rows, prep.cols) {
        let pass = Pass {
            a: qa.data(),
            w: qw.data(),
            row0,
            active_rows,
            col0,
            active_cols,
            slots: &schedules[ci],
        };
        let tile = array.run_pass(&pass)?;
        passes += 1;
        let chunk = &plan.chunks()[ci];
        let final_scale = chunk.ladder().scale(groups);
        let corr = correction.chunk(ci);
        for r in 0..active_rows {
            for c in 0..active_cols {
                let (i, j) = (row0 + r, col0 + c);
                let acc = tile[r * active_cols + c];
                accs[i * n + j] = acc;
                out[i * n + j] = acc as f64 * (final_scale * qw.col_scales()[j]) + corr[j];
            }
        }
    }
    let overflow = array.overflow;
    let bubbles = (groups as u64 - 1) * passes;
    let mut report = finish(array, Dataflow::Implicit, cfg, prep, passes, bubbles, 0);
    report.accumulators = Some(IntMatrix::from_vec_unchecked(
        m,
        n,
        if overflow { 63 } else { cfg.acc_bits },
        accs,
    ));
    report.output = FloatMatrix::from_vec_unchecked(m, n, out);
    Ok(report)
}

/// Runs the product the naive way: a separate pass per group with its own
/// fill and drain, then a vector-unit dequantize-and-add of each extra
/// partial. Float output matches [`crate::qgemm::gemm_explicit`].
pub fn simulate_explicit(
    qa: &QuantizedActivation<'_>,
    qw: &QuantizedWeight,
    correction: &BiasCorrection,
    cfg: &MsaConfig,
) -> Result<SimReport> {
    let prep = prepare(qa, qw, correction, cfg)?;
    let plan = qa.plan();
    let (m, n, groups) = (qa.rows(), qw.cols(), plan.groups());
    let mut array = Array::new(prep.rows, prep.cols, cfg.acc_bits, cfg.trace);
    let schedules: Vec<Vec<Vec<Slot>>> = plan
        .chunks()
        .iter()
        .map(|c| {
            (1..=groups)
                .map(|g| c.group_channels(g).iter().map(|&k| Slot::Channel(k)).collect())
                .collect()
        })
        .collect();
    let combine_cycles = (prep.rows * prep.cols).div_ceil(cfg.vector_lanes) as u64;

    let mut partials = vec![vec![0i64; m * n]; groups];
    let mut out = vec![0.0; m * n];
    let mut passes = 0u64;
    let mut dequant_cycles = 0u64;
    for (ci, row0, active_rows, col0, active_cols) in tiles(qa, n, prep.rows, prep.cols) {
        let chunk = &plan.chunks()[ci];
        for g in 1..=groups {
            let pass = Pass {
                a: qa.data(),
                w: qw.data(),
                row0,
                active_rows,
                col0,
                active_cols,
                slots: &schedules[ci][g - 1],
            };
            let tile = array.run_pass(&pass)?;
            passes += 1;
            if g > 1 {
                dequant_cycles += combine_cycles;
            }
            for r in 0..active_rows {
                for c in 0..active_cols {
                    partials[g - 1][(row0 + r) * n + col0 + c] = tile[r * active_cols + c];
                }
            }
        }
        let corr = correction.chunk(ci);
        for i in row0..row0 + active_rows {
            for j in col0..col0 + active_cols {
                let mut y = 0.0;
                for g in 1..=groups {
                    y += (chunk.ladder().scale(g) * qw.col_scales()[j]) * partials[g - 1][i * n + j] as f64;
                }
                out[i * n + j] = y + corr[j];
            }
        }
    }
    let overflow = array.overflow;
    let mut report = finish(array, Dataflow::Explicit, cfg, prep, passes, 0, dequant_cycles);
    let width = if overflow { 63 } else { cfg.acc_bits };
    report.group_partials =
        partials.into_iter().map(|p| IntMatrix::from_vec_unchecked(m, n, width, p)).collect();
    report.output = FloatMatrix::from_vec_unchecked(m, n, out);
    Ok(report)
}

/// Closed-form cycle count of [`simulate_gemm`] for one chunk layout; used
/// to cross-check the stepped model.
pub fn implicit_pass_cycles(rows: usize, cols: usize, k: usize, groups: usize) -> u64 {
    ((rows - 1) + (cols - 1) + k + groups - 1 + cols) as u64
}
