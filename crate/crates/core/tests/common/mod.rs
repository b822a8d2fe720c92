//! Random instances and brute-force oracles shared by the integration tests.
//! The oracles only read plan statistics (bias, group_of, scales) and
//! recompute everything else with plain loops.
#![allow(dead_code)]

use dquant::{
    bias_correction, build_plan, quantize_activation, quantize_weight, DecompositionPlan, FloatMatrix,
    IntMatrix, PlanConfig, QuantizedWeight,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian matrix whose columns get independent random magnitudes spread
/// over several octaves, with an occasional large outlier channel and a
/// per-channel offset.
pub fn spread_activation(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FloatMatrix {
    let col_scale: Vec<f64> = (0..cols)
        .map(|_| {
            let octave = rng.gen_range(-6.0..3.0f64);
            let outlier = if rng.gen_bool(0.05) { 40.0 } else { 1.0 };
            2f64.powf(octave) * outlier
        })
        .collect();
    let offset: Vec<f64> = (0..cols).map(|_| if rng.gen_bool(0.3) { rng.gen_range(-2.0..2.0) } else { 0.0 }).collect();
    let mut v = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        for j in 0..cols {
            v.push(gaussian(rng) * col_scale[j] + offset[j]);
        }
    }
    FloatMatrix::new(rows, cols, v).unwrap()
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> FloatMatrix {
    let v = (0..rows * cols).map(|_| gaussian(rng) * std).collect();
    FloatMatrix::new(rows, cols, v).unwrap()
}

/// Activations with a fixed fraction of channels amplified in every row.
pub fn outlier_activation(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fraction: f64, mult: f64) -> FloatMatrix {
    let count = ((fraction * cols as f64).round() as usize).max(1);
    let mut amplified = vec![false; cols];
    let mut placed = 0;
    while placed < count {
        let j = rng.gen_range(0..cols);
        if !amplified[j] {
            amplified[j] = true;
            placed += 1;
        }
    }
    let mut v = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        for &amp in &amplified {
            v.push(gaussian(rng) * if amp { mult } else { 1.0 });
        }
    }
    FloatMatrix::new(rows, cols, v).unwrap()
}

pub struct Instance {
    pub x: FloatMatrix,
    pub w: FloatMatrix,
    pub plan: DecompositionPlan,
}

pub fn instance(rng: &mut ChaCha8Rng, m: usize, k: usize, n: usize, cfg: PlanConfig) -> Instance {
    let x = spread_activation(rng, m, k);
    let w = gaussian_matrix(rng, k, n, 1.0 / (k as f64).sqrt());
    let plan = build_plan(&[x.clone()], cfg).unwrap();
    Instance { x, w, plan }
}

pub fn qmax(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// `round(v)` with ties away from zero, written out without `f64::round`.
pub fn round_half_away(v: f64) -> f64 {
    let t = v.abs().floor();
    let r = if v.abs() - t >= 0.5 { t + 1.0 } else { t };
    r.copysign(v)
}

pub fn oracle_quantize(v: f64, scale: f64, bits: u32) -> i64 {
    let q = round_half_away(v / scale) as i64;
    q.clamp(-qmax(bits), qmax(bits))
}

/// Per-group integer partials `P_g[i][j]`, selecting channels through
/// `group_of` rather than the plan's permutation. Returned as i128.
pub fn oracle_partials(qa: &IntMatrix, qw: &IntMatrix, plan: &DecompositionPlan) -> Vec<Vec<i128>> {
    let (m, k, n) = (qa.rows(), qa.cols(), qw.cols());
    let mut p = vec![vec![0i128; m * n]; plan.groups()];
    for i in 0..m {
        let chunk = plan.chunk_for_row(i);
        for j in 0..n {
            for c in 0..k {
                let g = chunk.group_of()[c];
                p[g - 1][i * n + j] += qa.get(i, c) as i128 * qw.get(c, j) as i128;
            }
        }
    }
    p
}

/// `Σ_g α^(G-g) · P_g`.
pub fn oracle_rescaled_sum(partials: &[Vec<i128>], alpha: u32) -> Vec<i128> {
    let g_count = partials.len();
    let mut out = vec![0i128; partials[0].len()];
    for (gi, p) in partials.iter().enumerate() {
        let weight = (alpha as i128).pow((g_count - 1 - gi) as u32);
        for (o, v) in out.iter_mut().zip(p) {
            *o += weight * v;
        }
    }
    out
}

/// Everything a GEMM oracle needs, quantized through the library so the
/// comparison isolates the product itself.
pub struct Quantized<'p> {
    pub qa: dquant::QuantizedActivation<'p>,
    pub qw: QuantizedWeight,
    pub corr: dquant::BiasCorrection,
}

pub fn quantize_all<'p>(inst: &'p Instance) -> Quantized<'p> {
    Quantized {
        qa: quantize_activation(&inst.x, &inst.plan).unwrap(),
        qw: quantize_weight(&inst.w, inst.plan.bits()).unwrap(),
        corr: bias_correction(&inst.plan, &inst.w).unwrap(),
    }
}

/// Number of tile passes an `r × c` array needs for the plan's chunks.
pub fn oracle_tile_passes(plan: &DecompositionPlan, m: usize, n: usize, r: usize, c: usize) -> u64 {
    plan.chunks()
        .iter()
        .map(|ch| {
            let rows = ch.row_range().end.min(m).saturating_sub(ch.row_range().start);
            (rows.div_ceil(r) * n.div_ceil(c)) as u64
        })
        .sum()
}

/// Rows of the six-channel walking example; channel `c` is column `c - 1`.
pub fn walking_example() -> FloatMatrix {
    let cols: [[f64; 4]; 6] = [
        [5.0, -3.0, 1.0, 2.0],
        [22.4, -22.4, 3.0, 0.0],
        [3.1, -1.0, 0.5, -3.1],
        [-9.0, 2.0, 9.0, 0.0],
        [0.0, 5.0, -5.0, 1.0],
        [12.0, -8.0, 0.0, 1.0],
    ];
    FloatMatrix::from_fn(4, 6, |i, j| cols[j][i])
}
