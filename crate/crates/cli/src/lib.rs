//! Report builders behind the `dquant` binary. Each command returns a
//! serializable report so tests can compare the binary's output with
//! direct library calls.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dquant::plan_io::{read_plan, write_plan};
use dquant::qgemm::OpCounts;
use dquant::sim::{simulate_explicit, simulate_gemm, trace_rescale_events, write_trace_csv, MsaConfig, SimSummary};
use dquant::tnsr::{read_tensor, write_tensor, Tensor};
use dquant::transformer::{
    forward_float, forward_quant, init_block, make_input, relative_error, BlockWeights, MatmulReport,
    OutlierSpec, QuantConfig, QuantPath,
};
use dquant::{
    bias_correction, gemm_explicit, gemm_implicit, gemm_reference, quantize_activation, quantize_weight,
    self_calibrate, tensor::error_metrics, DecompositionPlan, ErrorMetrics, FloatMatrix, PlanConfig,
    DEFAULT_ACC_BITS,
};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Overflow(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Overflow(_) => 4,
        }
    }
}

impl From<dquant::Error> for CliError {
    fn from(e: dquant::Error) -> Self {
        match e {
            dquant::Error::Config(m) => CliError::Usage(m),
            dquant::Error::BitWidth(b) => CliError::Usage(format!("unsupported bit width {b}")),
            dquant::Error::Overflow(m) => CliError::Overflow(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Anything read from disk is a data problem, whatever the library calls it.
fn data<T>(r: dquant::Result<T>, what: &Path) -> CliResult<T> {
    r.map_err(|e| CliError::Data(format!("{}: {e}", what.display())))
}

#[derive(Debug, Parser)]
#[command(name = "dquant", version, about = "Channel-group decomposed quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a decomposition plan from TNSR activation samples.
    Calibrate(CalibrateArgs),
    /// Quantized product of X·W through the selected paths.
    Gemm(GemmArgs),
    /// Error and cycle counts of X·W for several group counts.
    SweepGroups(SweepArgs),
    /// Float vs quantized run of a synthetic transformer block.
    Transformer(TransformerArgs),
    /// Write a Gaussian TNSR tensor, optionally with amplified channels.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Format {
    #[default]
    Text,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PathArg {
    Explicit,
    Implicit,
    Sim,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct QuantFlags {
    #[arg(long, default_value_t = 8)]
    pub bits: u32,
    #[arg(long, default_value_t = 2)]
    pub alpha: u32,
    #[arg(long, default_value_t = 8)]
    pub groups: usize,
    /// Rows per calibration chunk.
    #[arg(long, default_value_t = 256)]
    pub chunk: usize,
}

impl QuantFlags {
    pub fn plan_config(&self) -> CliResult<PlanConfig> {
        let cfg = PlanConfig::new(self.bits, self.alpha, self.groups, self.chunk);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ArrayFlags {
    #[arg(long, default_value_t = 64)]
    pub pe_rows: usize,
    #[arg(long, default_value_t = 64)]
    pub pe_cols: usize,
    #[arg(long, default_value_t = 4)]
    pub pe_bits: u32,
    #[arg(long, default_value_t = DEFAULT_ACC_BITS)]
    pub acc_bits: u32,
    /// Vector lanes for the explicit dataflow's dequantize-and-add.
    #[arg(long, default_value_t = 64)]
    pub lanes: usize,
}

impl ArrayFlags {
    pub fn msa(&self) -> MsaConfig {
        MsaConfig {
            pe_rows: self.pe_rows,
            pe_cols: self.pe_cols,
            pe_bits: self.pe_bits,
            acc_bits: self.acc_bits,
            int8_grouping: true,
            vector_lanes: self.lanes,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// TNSR activation samples with equal column counts.
    #[arg(required = true)]
    pub samples: Vec<PathBuf>,
    /// Plan document to write; printed to stdout when omitted.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub quant: QuantFlags,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct GemmArgs {
    /// Activation tensor (TNSR).
    #[arg(long)]
    pub x: PathBuf,
    /// Weight tensor (TNSR).
    #[arg(long)]
    pub w: PathBuf,
    /// Plan document; the activation calibrates itself when omitted. The
    /// plan's own b, alpha, G and chunk size override the flags.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PathArg::All)]
    pub path: PathArg,
    #[command(flatten)]
    pub quant: QuantFlags,
    #[command(flatten)]
    pub array: ArrayFlags,
    /// Write the simulator's rescale events as CSV (sim path only).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub w: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub groups: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub bits: u32,
    #[arg(long, default_value_t = 2)]
    pub alpha: u32,
    #[arg(long, default_value_t = 256)]
    pub chunk: usize,
    #[command(flatten)]
    pub array: ArrayFlags,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct TransformerArgs {
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 512)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub tokens: usize,
    #[arg(long, default_value_t = 0.02)]
    pub outlier_fraction: f64,
    #[arg(long, default_value_t = 50.0)]
    pub outlier_mult: f64,
    /// Weights use this seed, the input and its outlier channels `seed + 1`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also quantize the two activation-activation products.
    #[arg(long)]
    pub act_act: bool,
    #[arg(long, value_enum, default_value_t = PathArg::Implicit)]
    pub path: PathArg,
    #[command(flatten)]
    pub quant: QuantFlags,
    #[command(flatten)]
    pub array: ArrayFlags,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub cols: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub std: f64,
    #[arg(long, default_value_t = 0.0)]
    pub outlier_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub outlier_mult: f64,
    #[arg(short, long)]
    pub out: PathBuf,
}

/// Output of one command: what goes to stdout and whether an accumulator
/// overflowed along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub stdout: String,
    pub overflow: bool,
}

pub fn run(cli: &Cli) -> CliResult<Output> {
    match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Gemm(a) => {
            let r = gemm_report(a)?;
            let stdout = match a.format {
                Format::Text => json(&r),
                Format::Csv => r.to_csv(),
            };
            Ok(Output { stdout, overflow: r.overflow })
        }
        Command::SweepGroups(a) => {
            let rows = sweep_report(a)?;
            let stdout = match a.format {
                Format::Text => json(&rows),
                Format::Csv => sweep_csv(&rows),
            };
            Ok(Output { stdout, overflow: rows.iter().any(|r| r.overflow) })
        }
        Command::Transformer(a) => {
            let r = transformer_report(a)?;
            let stdout = match a.format {
                Format::Text => json(&r),
                Format::Csv => r.to_csv(),
            };
            Ok(Output { stdout, overflow: r.overflow })
        }
        Command::Generate(a) => cmd_generate(a),
    }
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

pub fn load_float(path: &Path) -> CliResult<FloatMatrix> {
    let t = data(read_tensor(path), path)?;
    data(t.to_float(), path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrateSummary {
    pub rows: usize,
    pub cols: usize,
    pub chunks: Vec<ChunkSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkSummary {
    pub row_range: [usize; 2],
    pub tmax: f64,
    /// Channels of each group, group 1 first.
    pub groups: Vec<Vec<usize>>,
}

pub fn calibrate_plan(a: &CalibrateArgs) -> CliResult<DecompositionPlan> {
    let cfg = a.quant.plan_config()?;
    let samples = a.samples.iter().map(|p| load_float(p)).collect::<CliResult<Vec<_>>>()?;
    if samples.iter().any(|s| s.cols() != samples[0].cols()) {
        return Err(CliError::Data("samples differ in column count".into()));
    }
    Ok(dquant::build_plan(&samples, cfg)?)
}

pub fn summarize_plan(plan: &DecompositionPlan) -> CalibrateSummary {
    CalibrateSummary {
        rows: plan.covered_rows(),
        cols: plan.cols(),
        chunks: plan
            .chunks()
            .iter()
            .map(|c| ChunkSummary {
                row_range: [c.row_range().start, c.row_range().end],
                tmax: c.ladder().tmax(),
                groups: (1..=plan.groups()).map(|g| c.group_channels(g).to_vec()).collect(),
            })
            .collect(),
    }
}

fn cmd_calibrate(a: &CalibrateArgs) -> CliResult<Output> {
    let plan = calibrate_plan(a)?;
    let stdout = match &a.out {
        None => dquant::plan_io::plan_to_string(&plan),
        Some(path) => {
            write_plan(path, &plan)?;
            let summary = summarize_plan(&plan);
            match a.format {
                Format::Text => json(&summary),
                Format::Csv => {
                    let mut s = String::from("chunk,group,channels\n");
                    for (ci, c) in summary.chunks.iter().enumerate() {
                        for (g, chans) in c.groups.iter().enumerate() {
                            let list: Vec<String> = chans.iter().map(usize::to_string).collect();
                            writeln!(s, "{ci},{},{}", g + 1, list.join(" ")).unwrap();
                        }
                    }
                    s
                }
            }
        }
    };
    Ok(Output { stdout, overflow: false })
}

fn cmd_generate(a: &GenerateArgs) -> CliResult<Output> {
    if !(a.std.is_finite() && a.std > 0.0) {
        return Err(CliError::Usage(format!("--std must be positive, got {}", a.std)));
    }
    let spec = OutlierSpec { fraction: a.outlier_fraction, multiplier: a.outlier_mult, seed: a.seed };
    let x = make_input(a.rows, a.cols, &spec, a.seed)?;
    let x = FloatMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) * a.std);
    write_tensor(&a.out, &Tensor::from_float(&x))?;
    Ok(Output { stdout: String::new(), overflow: false })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GemmConfigEcho {
    pub b: u32,
    pub alpha: u32,
    #[serde(rename = "G")]
    pub groups: usize,
    pub chunk_rows: usize,
    pub acc_bits: u32,
    pub plan_source: &'static str,
    pub shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathReport {
    pub path: &'static str,
    pub metrics: ErrorMetrics,
    pub overflow: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ops: Option<OpCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cycles: Option<SimSummary>,
    /// Cycle summary of the per-group dataflow on the same array.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explicit_cycles: Option<SimSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GemmReport {
    pub config: GemmConfigEcho,
    pub paths: Vec<PathReport>,
    pub overflow: bool,
}

impl GemmReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,mse,max_abs_err,sqnr_db,overflow,total_cycles,bubble_cycles,tile_passes\n");
        for p in &self.paths {
            let (t, b, n) = p
                .cycles
                .as_ref()
                .map(|c| (c.total_cycles.to_string(), c.bubble_cycles.to_string(), c.tile_passes.to_string()))
                .unwrap_or_default();
            writeln!(
                s,
                "{},{},{},{},{},{t},{b},{n}",
                p.path, p.metrics.mse, p.metrics.max_abs_err, p.metrics.sqnr_db, p.overflow
            )
            .unwrap();
        }
        s
    }
}

fn check_sim(alpha: u32) -> CliResult<()> {
    if alpha != 2 {
        return Err(CliError::Usage(format!("the simulator requires --alpha 2, got {alpha}")));
    }
    Ok(())
}

pub fn gemm_report(a: &GemmArgs) -> CliResult<GemmReport> {
    let x = load_float(&a.x)?;
    let w = load_float(&a.w)?;
    let (plan, source) = match &a.plan {
        Some(p) => (data(read_plan(p), p)?, "file"),
        None => (self_calibrate(&x, a.quant.plan_config()?)?, "self"),
    };
    let wants = |p: PathArg| a.path == p || a.path == PathArg::All;
    if a.path == PathArg::Sim || (a.path == PathArg::All && a.trace.is_some()) {
        check_sim(plan.alpha())?;
    }
    if a.trace.is_some() && !wants(PathArg::Sim) {
        return Err(CliError::Usage("--trace needs the sim path".into()));
    }

    let reference = gemm_reference(&x, &w)?;
    let qa = quantize_activation(&x, &plan)?;
    let qw = quantize_weight(&w, plan.bits())?;
    let corr = bias_correction(&plan, &w)?;
    let acc_bits = a.array.acc_bits;
    let mut paths = Vec::new();
    if wants(PathArg::Explicit) {
        let r = gemm_explicit(&qa, &qw, &corr, acc_bits)?;
        paths.push(PathReport {
            path: "explicit",
            metrics: error_metrics(&reference, &r.output)?,
            overflow: r.overflow_flag,
            ops: Some(r.ops),
            cycles: None,
            explicit_cycles: None,
        });
    }
    if wants(PathArg::Implicit) {
        let r = gemm_implicit(&qa, &qw, &corr, acc_bits)?;
        paths.push(PathReport {
            path: "implicit",
            metrics: error_metrics(&reference, &r.output)?,
            overflow: r.overflow_flag,
            ops: Some(r.ops),
            cycles: None,
            explicit_cycles: None,
        });
    }
    // `all` skips the simulator when the plan cannot run on it
    if wants(PathArg::Sim) && plan.alpha() == 2 {
        let mut msa = a.array.msa();
        msa.trace = a.trace.is_some();
        let r = simulate_gemm(&qa, &qw, &corr, &msa)?;
        if let Some(path) = &a.trace {
            let events = trace_rescale_events(&r)?;
            write_trace_csv(&events, BufWriter::new(File::create(path).map_err(dquant::Error::from)?))?;
        }
        let e = simulate_explicit(&qa, &qw, &corr, &a.array.msa())?;
        paths.push(PathReport {
            path: "sim",
            metrics: error_metrics(&reference, &r.output)?,
            overflow: r.overflow_flag || e.overflow_flag,
            ops: None,
            cycles: Some(r.summary()),
            explicit_cycles: Some(e.summary()),
        });
    }
    let cfg = plan.config();
    Ok(GemmReport {
        config: GemmConfigEcho {
            b: cfg.bits,
            alpha: cfg.alpha,
            groups: cfg.groups,
            chunk_rows: cfg.chunk_rows,
            acc_bits,
            plan_source: source,
            shape: [x.rows(), x.cols(), w.cols()],
        },
        overflow: paths.iter().any(|p| p.overflow),
        paths,
    })
}

pub const SWEEP_HEADER: &str = "G,mse,sqnr_db,cycles_implicit,cycles_explicit";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    #[serde(rename = "G")]
    pub groups: usize,
    pub mse: f64,
    #[serde(with = "float_text")]
    pub sqnr_db: f64,
    pub cycles_implicit: u64,
    pub cycles_explicit: u64,
    pub overflow: bool,
}

mod float_text {
    use serde::Serializer;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }
}

/// One row per requested G: implicit-path error against the float product,
/// and cycles of both dataflows on the configured array.
pub fn sweep_report(a: &SweepArgs) -> CliResult<Vec<SweepRow>> {
    check_sim(a.alpha)?;
    if a.groups.is_empty() {
        return Err(CliError::Usage("--groups needs at least one value".into()));
    }
    let x = load_float(&a.x)?;
    let w = load_float(&a.w)?;
    let reference = gemm_reference(&x, &w)?;
    let msa = a.array.msa();
    a.groups
        .iter()
        .map(|&g| {
            let cfg = PlanConfig::new(a.bits, a.alpha, g, a.chunk);
            cfg.validate()?;
            let plan = self_calibrate(&x, cfg)?;
            let qa = quantize_activation(&x, &plan)?;
            let qw = quantize_weight(&w, a.bits)?;
            let corr = bias_correction(&plan, &w)?;
            let imp = gemm_implicit(&qa, &qw, &corr, a.array.acc_bits)?;
            let metrics = error_metrics(&reference, &imp.output)?;
            let si = simulate_gemm(&qa, &qw, &corr, &msa)?;
            let se = simulate_explicit(&qa, &qw, &corr, &msa)?;
            Ok(SweepRow {
                groups: g,
                mse: metrics.mse,
                sqnr_db: metrics.sqnr_db,
                cycles_implicit: si.total_cycles,
                cycles_explicit: se.total_cycles,
                overflow: imp.overflow_flag || si.overflow_flag || se.overflow_flag,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.groups, r.mse, r.sqnr_db, r.cycles_implicit, r.cycles_explicit).unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformerEcho {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub tokens: usize,
    pub outliers: OutlierSpec,
    pub seed: u64,
    pub act_act: bool,
    pub path: QuantPath,
    pub b: u32,
    pub alpha: u32,
    #[serde(rename = "G")]
    pub groups: usize,
    pub chunk_rows: usize,
    pub acc_bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformerReport {
    pub config: TransformerEcho,
    pub relative_error: f64,
    pub end_to_end: ErrorMetrics,
    pub matmuls: Vec<MatmulReport>,
    pub overflow: bool,
}

impl TransformerReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("site,quantized,mse,max_abs_err,sqnr_db,overflow\n");
        let e = &self.end_to_end;
        writeln!(s, "end_to_end,true,{},{},{},{}", e.mse, e.max_abs_err, e.sqnr_db, self.overflow).unwrap();
        for r in &self.matmuls {
            let m = &r.metrics;
            writeln!(s, "{},{},{},{},{},{}", r.site, r.quantized, m.mse, m.max_abs_err, m.sqnr_db, r.overflow).unwrap();
        }
        s
    }
}

/// Weights and input of the `transformer` command.
pub fn transformer_inputs(a: &TransformerArgs) -> CliResult<(BlockWeights, FloatMatrix, OutlierSpec)> {
    let w = init_block(a.d_model, a.d_ff, a.heads, a.seed)?;
    let input_seed = a.seed.wrapping_add(1);
    let spec = OutlierSpec { fraction: a.outlier_fraction, multiplier: a.outlier_mult, seed: input_seed };
    let x = make_input(a.tokens, a.d_model, &spec, input_seed)?;
    Ok((w, x, spec))
}

pub fn transformer_config(a: &TransformerArgs) -> CliResult<QuantConfig> {
    let path = match a.path {
        PathArg::Explicit => QuantPath::Explicit,
        PathArg::Implicit => QuantPath::Implicit,
        PathArg::Sim => {
            check_sim(a.quant.alpha)?;
            QuantPath::Sim
        }
        PathArg::All => return Err(CliError::Usage("transformer runs one path; pick explicit, implicit or sim".into())),
    };
    Ok(QuantConfig {
        plan: a.quant.plan_config()?,
        quantize_act_act: a.act_act,
        path,
        acc_bits: a.array.acc_bits,
        msa: a.array.msa(),
    })
}

pub fn transformer_report(a: &TransformerArgs) -> CliResult<TransformerReport> {
    let cfg = transformer_config(a)?;
    let (w, x, spec) = transformer_inputs(a)?;
    let reference = forward_float(&x, &w)?;
    let q = forward_quant(&x, &w, &cfg, None)?;
    Ok(TransformerReport {
        config: TransformerEcho {
            d_model: a.d_model,
            d_ff: a.d_ff,
            heads: a.heads,
            tokens: a.tokens,
            outliers: spec,
            seed: a.seed,
            act_act: a.act_act,
            path: cfg.path,
            b: cfg.plan.bits,
            alpha: cfg.plan.alpha,
            groups: cfg.plan.groups,
            chunk_rows: cfg.plan.chunk_rows,
            acc_bits: cfg.acc_bits,
        },
        relative_error: relative_error(&reference, &q.output)?,
        end_to_end: error_metrics(&reference, &q.output)?,
        matmuls: q.reports,
        overflow: q.overflow,
    })
}
