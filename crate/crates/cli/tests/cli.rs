use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::Parser;
use dquant::plan_io::{plan_to_string, read_plan};
use dquant::tnsr::{read_tensor, write_tensor, Tensor};
use dquant::transformer::{forward_float, forward_quant, init_block, make_input, relative_error, OutlierSpec, QuantConfig};
use dquant::{FloatMatrix, PlanConfig};
use dquant_cli::{gemm_report, run, sweep_report, transformer_report, Cli, Command as Sub, SWEEP_HEADER};
use serde_json::Value;

fn dquant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dquant")).args(args).output().unwrap()
}

fn ok_stdout(args: &[&str]) -> String {
    let out = dquant(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn parse(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("dquant").chain(args.iter().copied())).unwrap()
}

fn write_float(dir: &Path, name: &str, m: &FloatMatrix) -> PathBuf {
    let p = dir.join(name);
    write_tensor(&p, &Tensor::from_float(m)).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn walking_example() -> FloatMatrix {
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

/// Activation with amplified channels and a weight, both from the binary.
fn operands(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let x = dir.join(format!("x{seed}.tnsr"));
    let w = dir.join(format!("w{seed}.tnsr"));
    let seed_s = seed.to_string();
    let w_seed = (seed + 1000).to_string();
    ok_stdout(&["generate", "--rows", "64", "--cols", "48", "--seed", &seed_s, "--outlier-fraction", "0.05",
        "--outlier-mult", "40", "-o", s(&x)]);
    ok_stdout(&["generate", "--rows", "48", "--cols", "16", "--seed", &w_seed, "--std", "0.15", "-o", s(&w)]);
    (x, w)
}

#[test]
fn calibrate_walking_example() {
    let dir = tempfile::tempdir().unwrap();
    let x = write_float(dir.path(), "fig.tnsr", &walking_example());
    let plan = dir.path().join("plan.json");
    let summary = ok_stdout(&["calibrate", s(&x), "--groups", "3", "--bits", "8", "-o", s(&plan)]);
    let v: Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(v["chunks"][0]["groups"], serde_json::json!([[1], [3, 5], [0, 2, 4]]));

    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
    assert_eq!(doc["chunks"][0]["group_of"], serde_json::json!([3, 1, 3, 2, 3, 2]));
    assert_eq!(doc["G"], 3);

    // printed to stdout without -o, byte for byte the same document
    let printed = ok_stdout(&["calibrate", s(&x), "--groups", "3", "--bits", "8"]);
    assert_eq!(printed, std::fs::read_to_string(&plan).unwrap());
}

#[test]
fn plan_and_tensor_files_reserialize_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (x, _) = operands(dir.path(), 1);
    let bytes = std::fs::read(&x).unwrap();
    assert_eq!(read_tensor(&x).unwrap().encode(), bytes);

    let plan = dir.path().join("p.json");
    ok_stdout(&["calibrate", s(&x), "--chunk", "16", "--groups", "5", "-o", s(&plan)]);
    let text = std::fs::read_to_string(&plan).unwrap();
    assert_eq!(plan_to_string(&read_plan(&plan).unwrap()), text);
}

#[test]
fn degenerate_and_corrupt_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let zero = write_float(dir.path(), "zero.tnsr", &FloatMatrix::zeros(3, 4));
    let out = ok_stdout(&["calibrate", s(&zero), "--groups", "4"]);
    let doc: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(doc["chunks"][0]["tmax"], 0.0);
    assert_eq!(doc["chunks"][0]["group_of"], serde_json::json!([4, 4, 4, 4]));

    let mut bytes = std::fs::read(&zero).unwrap();
    bytes[0] = b'N';
    let bad = dir.path().join("bad.tnsr");
    std::fs::write(&bad, &bytes).unwrap();
    let r = dquant(&["calibrate", s(&bad)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("magic"));

    let r = dquant(&["calibrate", s(&dir.path().join("missing.tnsr"))]);
    assert_eq!(r.status.code(), Some(3));

    let plan = dir.path().join("p.json");
    std::fs::write(&plan, "{\"version\": 1}").unwrap();
    let r = dquant(&["gemm", "--x", s(&zero), "--w", s(&zero), "--plan", s(&plan)]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let (x, w) = operands(dir.path(), 2);
    assert_eq!(dquant(&["gemm", "--x", s(&x)]).status.code(), Some(2));
    assert_eq!(dquant(&["frobnicate"]).status.code(), Some(2));
    let sim3 = dquant(&["gemm", "--x", s(&x), "--w", s(&w), "--path", "sim", "--alpha", "3"]);
    assert_eq!(sim3.status.code(), Some(2));
    let bits = dquant(&["gemm", "--x", s(&x), "--w", s(&w), "--bits", "5"]);
    assert_eq!(bits.status.code(), Some(2));
    let trace = dquant(&["gemm", "--x", s(&x), "--w", s(&w), "--path", "implicit", "--trace", "t.csv"]);
    assert_eq!(trace.status.code(), Some(2));
}

#[test]
fn overflow_exits_with_four_after_reporting() {
    let dir = tempfile::tempdir().unwrap();
    let (x, w) = operands(dir.path(), 3);
    let r = dquant(&["gemm", "--x", s(&x), "--w", s(&w), "--path", "implicit", "--acc-bits", "10"]);
    assert_eq!(r.status.code(), Some(4));
    let v: Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(v["overflow"], true);
}

#[test]
fn gemm_all_paths_agree_and_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (x, w) = operands(dir.path(), 4);
    let args = ["gemm", "--x", s(&x), "--w", s(&w), "--bits", "4", "--groups", "6", "--chunk", "32",
        "--pe-rows", "16", "--pe-cols", "16"];
    let text = ok_stdout(&args);
    let v: Value = serde_json::from_str(&text).unwrap();

    let Sub::Gemm(g) = parse(&args).command else { unreachable!() };
    let direct = gemm_report(&g).unwrap();
    assert_eq!(v, serde_json::to_value(&direct).unwrap());

    let paths = v["paths"].as_array().unwrap();
    assert_eq!(paths.len(), 3);
    let mse: Vec<f64> = paths.iter().map(|p| p["metrics"]["mse"].as_f64().unwrap()).collect();
    assert!((mse[0] - mse[1]).abs() <= 1e-9 * mse[0]);
    assert_eq!(mse[1], mse[2], "the simulator is the implicit path");

    let cycles = &paths[2]["cycles"];
    let passes = cycles["tile_passes"].as_u64().unwrap();
    assert_eq!(cycles["bubble_cycles"].as_u64().unwrap(), 5 * passes);
    // 4-bit operands keep the full 16x16 grid: two 32-row chunks of two row tiles
    assert_eq!(passes, 2 * 2);

    // library-level metrics for the same plan
    let xm = read_tensor(&x).unwrap().to_float().unwrap();
    let wm = read_tensor(&w).unwrap().to_float().unwrap();
    let cmp = dquant::compare_paths(&xm, &wm, dquant::PlanSource::SelfCalibrate(PlanConfig::new(4, 2, 6, 32)), 32)
        .unwrap();
    assert_eq!(mse[1], cmp.implicit.mse);
    assert_eq!(mse[0], cmp.explicit.mse);
}

#[test]
fn gemm_csv_and_trace_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (x, w) = operands(dir.path(), 5);
    let trace = dir.path().join("trace.csv");
    let csv = ok_stdout(&["gemm", "--x", s(&x), "--w", s(&w), "--path", "sim", "--groups", "3", "--chunk", "64",
        "--pe-rows", "128", "--pe-cols", "32", "--format", "csv", "--trace", s(&trace)]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "path,mse,max_abs_err,sqnr_db,overflow,total_cycles,bubble_cycles,tile_passes");
    assert!(lines[1].starts_with("sim,"));
    assert_eq!(lines.len(), 2);
    let t = std::fs::read_to_string(&trace).unwrap();
    let mut rows = t.lines();
    assert_eq!(rows.next(), Some("cycle,pe_row,pe_col,event"));
    // one tile of 64x16 outputs, two rescales per PE
    assert_eq!(rows.clone().count(), 64 * 16 * 2);
    assert!(rows.all(|r| r.ends_with(",rescale")));
}

#[test]
fn sweep_rows_per_group_count() {
    let dir = tempfile::tempdir().unwrap();
    let (x, w) = operands(dir.path(), 6);
    let args = ["sweep-groups", "--x", s(&x), "--w", s(&w), "--groups", "1,2,4,8,16", "--bits", "4",
        "--pe-rows", "16", "--pe-cols", "16"];
    let csv = ok_stdout(&args);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert_eq!(lines.len(), 6);
    let g: Vec<usize> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(g, vec![1, 2, 4, 8, 16]);

    let Sub::SweepGroups(a) = parse(&args).command else { unreachable!() };
    assert_eq!(csv, dquant_cli::sweep_csv(&sweep_report(&a).unwrap()));
}

#[test]
fn sweep_error_shrinks_with_groups_on_outlier_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut per_g: Vec<Vec<f64>> = vec![Vec::new(); 4];
    let mut flat = Vec::new();
    for seed in 0..7 {
        let (x, w) = operands(dir.path(), 100 + seed);
        let args = ["sweep-groups", "--x", s(&x), "--w", s(&w), "--groups", "1,2,4,8", "--bits", "4",
            "--pe-rows", "16", "--pe-cols", "16"];
        let Sub::SweepGroups(a) = parse(&args).command else { unreachable!() };
        let rows = sweep_report(&a).unwrap();
        for (i, r) in rows.iter().enumerate() {
            per_g[i].push(r.mse);
        }
        flat.push(rows[3].cycles_implicit as f64 / rows[0].cycles_implicit as f64);
    }
    let medians: Vec<f64> = per_g
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
    // seven extra stream slots on a 48-channel reduction
    assert!(flat.iter().all(|&f| f < 1.1), "{flat:?}");
}

#[test]
fn transformer_report_is_deterministic_and_matches_the_library() {
    let args = ["transformer", "--d-model", "16", "--d-ff", "32", "--heads", "2", "--tokens", "24", "--seed", "3",
        "--bits", "4", "--groups", "4", "--chunk", "8"];
    let a = ok_stdout(&args);
    assert_eq!(a, ok_stdout(&args));
    let v: Value = serde_json::from_str(&a).unwrap();

    let Sub::Transformer(t) = parse(&args).command else { unreachable!() };
    assert_eq!(v, serde_json::to_value(transformer_report(&t).unwrap()).unwrap());

    // same numbers from the library without the CLI crate in between
    let w = init_block(16, 32, 2, 3).unwrap();
    let spec = OutlierSpec { fraction: 0.02, multiplier: 50.0, seed: 4 };
    let x = make_input(24, 16, &spec, 4).unwrap();
    let cfg = QuantConfig { plan: PlanConfig::new(4, 2, 4, 8), ..Default::default() };
    let q = forward_quant(&x, &w, &cfg, None).unwrap();
    let f = forward_float(&x, &w).unwrap();
    assert_eq!(v["relative_error"].as_f64().unwrap(), relative_error(&f, &q.output).unwrap());
    assert_eq!(v["end_to_end"]["mse"].as_f64().unwrap(), dquant::tensor::error_metrics(&f, &q.output).unwrap().mse);
}

#[test]
fn transformer_act_act_flag_changes_only_attention_rows() {
    let base = ["transformer", "--d-model", "16", "--d-ff", "32", "--heads", "2", "--tokens", "16", "--format", "csv",
        "--chunk", "8"];
    let off = ok_stdout(&base);
    let mut with = base.to_vec();
    with.push("--act-act");
    let on = ok_stdout(&with);
    let (off, on): (Vec<&str>, Vec<&str>) = (off.lines().collect(), on.lines().collect());
    assert_eq!(off.len(), on.len());
    for (a, b) in off.iter().zip(&on).skip(2) {
        let attention = a.starts_with("scores") || a.starts_with("attn_v");
        assert_eq!(attention, a != b, "{a} / {b}");
    }
}

#[test]
fn cli_run_reports_overflow_without_failing() {
    let cli = parse(&["transformer", "--d-model", "8", "--d-ff", "8", "--heads", "1", "--tokens", "4",
        "--chunk", "4", "--acc-bits", "6"]);
    let out = run(&cli).unwrap();
    assert!(out.overflow);
}
