//! A single pre-LayerNorm transformer block (multi-head attention plus a
//! ReLU feed-forward layer) that can route its matrix products through the
//! quantized GEMM paths.
//!
//! ```text
//! h  = LN1(x)
//! Q, K, V = h·W_Q, h·W_K, h·W_V
//! S_h = softmax(Q_h·K_hᵀ / sqrt(d_head))        per head
//! x_o = concat_h(S_h·V_h)·W_O + x
//! out = ReLU(LN2(x_o)·W_FC1)·W_FC2 + x_o
//! ```
//!
//! LayerNorm, softmax, ReLU and the residual adds always run in float.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::calibrate::{
    bias_correction, build_plan, quantize_activation, quantize_weight, self_calibrate,
    DecompositionPlan, PlanConfig,
};
use crate::error::{Error, Result};
use crate::qgemm::{gemm_explicit, gemm_implicit, DEFAULT_ACC_BITS};
use crate::sim::{simulate_gemm, MsaConfig};
use crate::tensor::{error_metrics, matmul_float, ErrorMetrics, FloatMatrix, IntMatrix};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub d_model: usize,
    pub d_ff: usize,
    pub num_heads: usize,
    pub seed: u64,
    pub wq: FloatMatrix,
    pub wk: FloatMatrix,
    pub wv: FloatMatrix,
    pub wo: FloatMatrix,
    pub fc1: FloatMatrix,
    pub fc2: FloatMatrix,
    pub ln1_gain: Vec<f64>,
    pub ln1_offset: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_offset: Vec<f64>,
}

impl BlockWeights {
    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    fn check(&self) -> Result<()> {
        check_dims(self.d_model, self.d_ff, self.num_heads)?;
        let d = self.d_model;
        let square = [&self.wq, &self.wk, &self.wv, &self.wo];
        if square.iter().any(|w| w.shape() != (d, d))
            || self.fc1.shape() != (d, self.d_ff)
            || self.fc2.shape() != (self.d_ff, d)
            || [&self.ln1_gain, &self.ln1_offset, &self.ln2_gain, &self.ln2_offset]
                .iter()
                .any(|v| v.len() != d)
        {
            return Err(Error::shape("block weights do not match the declared dimensions"));
        }
        Ok(())
    }
}

fn check_dims(d_model: usize, d_ff: usize, num_heads: usize) -> Result<()> {
    if d_model == 0 || d_ff == 0 || num_heads == 0 {
        return Err(Error::config("block dimensions must be positive"));
    }
    if d_model % num_heads != 0 {
        return Err(Error::config(format!(
            "d_model {d_model} is not divisible by {num_heads} heads"
        )));
    }
    Ok(())
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> FloatMatrix {
    FloatMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Gaussian weights with standard deviation `1/sqrt(fan_in)`, unit
/// LayerNorm gains and zero offsets.
pub fn init_block(d_model: usize, d_ff: usize, num_heads: usize, seed: u64) -> Result<BlockWeights> {
    check_dims(d_model, d_ff, num_heads)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s_model = 1.0 / (d_model as f64).sqrt();
    let s_ff = 1.0 / (d_ff as f64).sqrt();
    Ok(BlockWeights {
        d_model,
        d_ff,
        num_heads,
        seed,
        wq: gaussian(d_model, d_model, s_model, &mut rng),
        wk: gaussian(d_model, d_model, s_model, &mut rng),
        wv: gaussian(d_model, d_model, s_model, &mut rng),
        wo: gaussian(d_model, d_model, s_model, &mut rng),
        fc1: gaussian(d_model, d_ff, s_model, &mut rng),
        fc2: gaussian(d_ff, d_model, s_ff, &mut rng),
        ln1_gain: vec![1.0; d_model],
        ln1_offset: vec![0.0; d_model],
        ln2_gain: vec![1.0; d_model],
        ln2_offset: vec![0.0; d_model],
    })
}

/// Which channels of a synthetic input get amplified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OutlierSpec {
    pub fraction: f64,
    pub multiplier: f64,
    pub seed: u64,
}

impl OutlierSpec {
    pub fn none() -> Self {
        Self { fraction: 0.0, multiplier: 1.0, seed: 0 }
    }

    /// The amplified channels, sorted. Rounds `fraction · d_model` and always
    /// leaves at least one ordinary channel.
    pub fn channels(&self, d_model: usize) -> Result<Vec<usize>> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(Error::config(format!("outlier fraction {} not in [0, 1)", self.fraction)));
        }
        if !(self.multiplier.is_finite() && self.multiplier >= 1.0) {
            return Err(Error::config(format!("outlier multiplier {} must be >= 1", self.multiplier)));
        }
        let count = ((self.fraction * d_model as f64).round() as usize).min(d_model.saturating_sub(1));
        let mut idx: Vec<usize> = (0..d_model).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let mut picked = idx[..count].to_vec();
        picked.sort_unstable();
        Ok(picked)
    }
}

/// Standard normal tokens with the outlier channels scaled in every row.
pub fn make_input(n_tokens: usize, d_model: usize, outliers: &OutlierSpec, seed: u64) -> Result<FloatMatrix> {
    let channels = outliers.channels(d_model)?;
    let mut scale = vec![1.0; d_model];
    for &c in &channels {
        scale[c] = outliers.multiplier;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(FloatMatrix::from_fn(n_tokens, d_model, |_, j| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale[j]
    }))
}

/// One matrix product inside the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    QProj,
    KProj,
    VProj,
    Scores(usize),
    AttnValue(usize),
    OProj,
    Fc1,
    Fc2,
}

impl Site {
    pub fn is_act_act(self) -> bool {
        matches!(self, Site::Scores(_) | Site::AttnValue(_))
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::QProj => f.write_str("q_proj"),
            Site::KProj => f.write_str("k_proj"),
            Site::VProj => f.write_str("v_proj"),
            Site::Scores(h) => write!(f, "scores.h{h}"),
            Site::AttnValue(h) => write!(f, "attn_v.h{h}"),
            Site::OProj => f.write_str("o_proj"),
            Site::Fc1 => f.write_str("fc1"),
            Site::Fc2 => f.write_str("fc2"),
        }
    }
}

fn layer_norm(x: &FloatMatrix, gain: &[f64], offset: &[f64]) -> FloatMatrix {
    let d = x.cols() as f64;
    let mut out = Vec::with_capacity(x.rows() * x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        out.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * inv * gain[j] + offset[j]));
    }
    FloatMatrix::new(x.rows(), x.cols(), out).expect("layer norm stays finite")
}

fn softmax_rows(x: &FloatMatrix, scale: f64) -> FloatMatrix {
    let mut out = Vec::with_capacity(x.rows() * x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
        let start = out.len();
        out.extend(row.iter().map(|&v| (v * scale - max).exp()));
        let sum: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= sum);
    }
    FloatMatrix::new(x.rows(), x.cols(), out).expect("softmax stays finite")
}

fn add(a: &FloatMatrix, b: &FloatMatrix) -> FloatMatrix {
    FloatMatrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + b.get(i, j))
}

/// Runs the block, delegating every matrix product to `mm`.
fn forward_with(
    x: &FloatMatrix,
    w: &BlockWeights,
    mm: &mut dyn FnMut(Site, &FloatMatrix, &FloatMatrix) -> Result<FloatMatrix>,
) -> Result<FloatMatrix> {
    w.check()?;
    if x.cols() != w.d_model {
        return Err(Error::shape(format!(
            "input has {} features, block expects {}",
            x.cols(),
            w.d_model
        )));
    }
    let (n, d, dh) = (x.rows(), w.d_model, w.d_head());
    let h = layer_norm(x, &w.ln1_gain, &w.ln1_offset);
    let q = mm(Site::QProj, &h, &w.wq)?;
    let k = mm(Site::KProj, &h, &w.wk)?;
    let v = mm(Site::VProj, &h, &w.wv)?;

    let mut attn = vec![0.0; n * d];
    let score_scale = 1.0 / (dh as f64).sqrt();
    for head in 0..w.num_heads {
        let cols = head * dh..(head + 1) * dh;
        let qh = q.col_slice(cols.start, cols.end);
        let kh_t = k.col_slice(cols.start, cols.end).transpose();
        let vh = v.col_slice(cols.start, cols.end);
        let scores = mm(Site::Scores(head), &qh, &kh_t)?;
        let probs = softmax_rows(&scores, score_scale);
        let out = mm(Site::AttnValue(head), &probs, &vh)?;
        for i in 0..n {
            attn[i * d + cols.start..i * d + cols.end].copy_from_slice(out.row(i));
        }
    }
    let attn = FloatMatrix::new(n, d, attn)?;
    let x_o = add(&mm(Site::OProj, &attn, &w.wo)?, x);

    let h2 = layer_norm(&x_o, &w.ln2_gain, &w.ln2_offset);
    let hidden = mm(Site::Fc1, &h2, &w.fc1)?;
    let hidden = FloatMatrix::from_fn(hidden.rows(), hidden.cols(), |i, j| hidden.get(i, j).max(0.0));
    Ok(add(&mm(Site::Fc2, &hidden, &w.fc2)?, &x_o))
}

pub fn forward_float(x: &FloatMatrix, w: &BlockWeights) -> Result<FloatMatrix> {
    forward_with(x, w, &mut |_, a, b| matmul_float(a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantPath {
    Explicit,
    Implicit,
    Sim,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub plan: PlanConfig,
    /// Also quantize `Q·Kᵀ` and `S·V` (one plan per head).
    pub quantize_act_act: bool,
    pub path: QuantPath,
    pub acc_bits: u32,
    /// Array used by [`QuantPath::Sim`].
    pub msa: MsaConfig,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            plan: PlanConfig::default(),
            quantize_act_act: false,
            path: QuantPath::Implicit,
            acc_bits: DEFAULT_ACC_BITS,
            msa: MsaConfig::default(),
        }
    }
}

impl QuantConfig {
    fn quantizes(&self, site: Site) -> bool {
        self.quantize_act_act || !site.is_act_act()
    }
}

/// Calibrated plans for every quantized product of a block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockPlans {
    pub plans: BTreeMap<Site, DecompositionPlan>,
}

/// Calibrates every quantized product on the float activations that the
/// samples produce at that point of the block.
pub fn calibrate_block(samples: &[FloatMatrix], w: &BlockWeights, cfg: &QuantConfig) -> Result<BlockPlans> {
    let mut seen: BTreeMap<Site, Vec<FloatMatrix>> = BTreeMap::new();
    for x in samples {
        forward_with(x, w, &mut |site, a, b| {
            if cfg.quantizes(site) {
                seen.entry(site).or_default().push(a.clone());
            }
            matmul_float(a, b)
        })?;
    }
    let plans = seen
        .into_iter()
        .map(|(site, acts)| Ok((site, build_plan(&acts, cfg.plan)?)))
        .collect::<Result<_>>()?;
    Ok(BlockPlans { plans })
}

/// Error of one product measured in isolation: both the quantized and the
/// float product see the float block's activation at that point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatmulReport {
    pub site: String,
    pub quantized: bool,
    pub metrics: ErrorMetrics,
    pub overflow: bool,
}

/// Integer tensors seen by one quantized product in the end-to-end run.
#[derive(Debug, Clone, PartialEq)]
pub struct IntTrace {
    pub site: Site,
    pub activation: IntMatrix,
    /// `Σ_g α^(G-g) · P_g` per output element.
    pub accumulators: IntMatrix,
}

#[derive(Debug, Clone)]
pub struct QuantForward {
    pub output: FloatMatrix,
    pub reports: Vec<MatmulReport>,
    pub int_traces: Vec<IntTrace>,
    pub overflow: bool,
}

struct QuantProduct {
    output: FloatMatrix,
    activation: IntMatrix,
    accumulators: IntMatrix,
    overflow: bool,
}

fn quantized_product(
    a: &FloatMatrix,
    b: &FloatMatrix,
    plan: &DecompositionPlan,
    cfg: &QuantConfig,
) -> Result<QuantProduct> {
    let qa = quantize_activation(a, plan)?;
    let qw = quantize_weight(b, plan.bits())?;
    let corr = bias_correction(plan, b)?;
    let (output, accumulators, overflow) = match cfg.path {
        QuantPath::Implicit => {
            let r = gemm_implicit(&qa, &qw, &corr, cfg.acc_bits)?;
            (r.output, r.accumulators.expect("implicit path keeps accumulators"), r.overflow_flag)
        }
        QuantPath::Explicit => {
            let r = gemm_explicit(&qa, &qw, &corr, cfg.acc_bits)?;
            let partials = r.int_partials.expect("explicit path keeps partials");
            let acc = rescaled_sum(&partials, plan.alpha())?;
            (r.output, acc, r.overflow_flag)
        }
        QuantPath::Sim => {
            let msa = MsaConfig { acc_bits: cfg.acc_bits, ..cfg.msa };
            let r = simulate_gemm(&qa, &qw, &corr, &msa)?;
            (r.output, r.accumulators.expect("implicit dataflow keeps accumulators"), r.overflow_flag)
        }
    };
    Ok(QuantProduct { output, activation: qa.data().clone(), accumulators, overflow })
}

/// `Σ_g α^(G-g) · P_g`, element-wise.
pub fn rescaled_sum(partials: &[IntMatrix], alpha: u32) -> Result<IntMatrix> {
    let first = partials.first().ok_or_else(|| Error::shape("no partials"))?;
    let mut acc = vec![0i64; first.data().len()];
    for p in partials {
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a = a
                .checked_mul(alpha as i64)
                .and_then(|x| x.checked_add(v))
                .ok_or_else(|| Error::Overflow("rescaled partial sum".into()))?;
        }
    }
    let bits = partials.iter().map(IntMatrix::bits).max().unwrap_or(63);
    IntMatrix::new(first.rows(), first.cols(), bits, acc.clone())
        .or_else(|_| IntMatrix::new(first.rows(), first.cols(), 63, acc))
}

/// Runs the block with quantized products. Without `plans`, each product
/// calibrates on its own input.
pub fn forward_quant(
    x: &FloatMatrix,
    w: &BlockWeights,
    cfg: &QuantConfig,
    plans: Option<&BlockPlans>,
) -> Result<QuantForward> {
    let plan_for = |site: Site, a: &FloatMatrix| -> Result<std::borrow::Cow<'_, DecompositionPlan>> {
        match plans {
            Some(p) => p
                .plans
                .get(&site)
                .map(std::borrow::Cow::Borrowed)
                .ok_or_else(|| Error::config(format!("no calibrated plan for {site}"))),
            None => Ok(std::borrow::Cow::Owned(self_calibrate(a, cfg.plan)?)),
        }
    };

    let mut reports = Vec::new();
    forward_with(x, w, &mut |site, a, b| {
        let reference = matmul_float(a, b)?;
        let report = if cfg.quantizes(site) {
            let plan = plan_for(site, a)?;
            let q = quantized_product(a, b, &plan, cfg)?;
            MatmulReport {
                site: site.to_string(),
                quantized: true,
                metrics: error_metrics(&reference, &q.output)?,
                overflow: q.overflow,
            }
        } else {
            MatmulReport {
                site: site.to_string(),
                quantized: false,
                metrics: error_metrics(&reference, &reference)?,
                overflow: false,
            }
        };
        reports.push(report);
        Ok(reference)
    })?;

    let mut int_traces = Vec::new();
    let mut overflow = false;
    let output = forward_with(x, w, &mut |site, a, b| {
        if !cfg.quantizes(site) {
            return matmul_float(a, b);
        }
        let plan = plan_for(site, a)?;
        let q = quantized_product(a, b, &plan, cfg)?;
        overflow |= q.overflow;
        int_traces.push(IntTrace { site, activation: q.activation, accumulators: q.accumulators });
        Ok(q.output)
    })?;
    Ok(QuantForward { output, reports, int_traces, overflow })
}

/// `‖reference − approx‖_F / ‖reference‖_F`.
pub fn relative_error(reference: &FloatMatrix, approx: &FloatMatrix) -> Result<f64> {
    let m = error_metrics(reference, approx)?;
    let n = reference.data().len() as f64;
    let signal = reference.data().iter().map(|v| v * v).sum::<f64>();
    Ok(if signal == 0.0 { if m.mse == 0.0 { 0.0 } else { f64::INFINITY } } else { (m.mse * n / signal).sqrt() })
}
