//! Command-line behavior: exit codes, config merging, determinism of
//! repeated invocations, and the documented output layouts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn relex() -> Command {
    Command::new(env!("CARGO_BIN_EXE_relex"))
}

fn run(args: &[&str]) -> Output {
    relex().args(args).output().expect("spawn relex")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn plant_config(dir: &Path, noise_scale: f64) -> PathBuf {
    let cfg = serde_json::json!({
        "rng_seed": 11,
        "planted_direction_seed": 13,
        "t_values": [1, 2, 3, 4, 5, 6, 7, 8],
        "noise": {"kind": if noise_scale > 0.0 { "orthogonal_iid" } else { "none" }},
        "noise_scale": noise_scale,
        "tensors": [
            {"name": "layers.0.w", "shape": [8, 8], "slope": 0.5, "intercept": 0.25},
            {"name": "layers.1.w", "shape": [4, 16], "slope": 0.25, "intercept": 1.0}
        ]
    });
    let path = dir.join("plant.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn synth_series(dir: &Path, noise_scale: f64) -> PathBuf {
    let cfg = plant_config(dir, noise_scale);
    let series = dir.join("series");
    let out = run(&["synth", "--config", cfg.to_str().unwrap(), "--out", series.to_str().unwrap()]);
    assert_exit(&out, 0);
    series
}

fn read_dir_blobs(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut blobs = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "bin") {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                blobs.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    blobs.sort();
    blobs
}

#[test]
fn missing_series_exits_2() {
    let out = run(&["inspect", "--series", "/nonexistent/series"]);
    assert_exit(&out, 2);
    let out = run(&["diagnose", "--series", "/nonexistent", "--t-cut", "8", "--out", "/tmp/x"]);
    assert_exit(&out, 2);
}

#[test]
fn expo_without_alpha_exits_2_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let series = synth_series(dir.path(), 0.0);
    let out = run(&[
        "extrapolate",
        "--series",
        series.to_str().unwrap(),
        "--t-cut",
        "8",
        "--targets",
        "16",
        "--method",
        "expo",
        "--out",
        dir.path().join("pred").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("usage"), "stderr: {stderr}");
    assert!(stderr.contains("--alpha"), "stderr: {stderr}");
}

#[test]
fn missing_required_flag_exits_2() {
    let out = run(&["extrapolate", "--t-cut", "8", "--targets", "16", "--out", "/tmp/x"]);
    assert_exit(&out, 2);
}

#[test]
fn config_file_supplies_flags_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let series = synth_series(dir.path(), 0.0);
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "series": series,
            "t_cut": 8,
            "targets": [16],
            "out": dir.path().join("from_config"),
        })
        .to_string(),
    )
    .unwrap();
    // All parameters from the config file.
    let out = run(&["extrapolate", "--config", cfg.to_str().unwrap()]);
    assert_exit(&out, 0);
    assert!(dir.path().join("from_config/step_16").is_dir());

    // Flag overrides the config's out directory.
    let out = run(&[
        "extrapolate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("overridden").to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    assert!(dir.path().join("overridden/step_16").is_dir());
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = plant_config(dir.path(), 0.1);
    for name in ["a", "b"] {
        let out = run(&[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join(name).to_str().unwrap(),
        ]);
        assert_exit(&out, 0);
    }
    assert_eq!(read_dir_blobs(&dir.path().join("a")), read_dir_blobs(&dir.path().join("b")));
    let ga = std::fs::read(dir.path().join("a/ground_truth.json")).unwrap();
    let gb = std::fs::read(dir.path().join("b/ground_truth.json")).unwrap();
    assert_eq!(ga, gb);
}

#[test]
fn repeated_extrapolate_is_deterministic_outside_wall_time() {
    let dir = tempfile::tempdir().unwrap();
    let series = synth_series(dir.path(), 0.1);
    for name in ["p1", "p2"] {
        let out = run(&[
            "extrapolate",
            "--series",
            series.to_str().unwrap(),
            "--t-cut",
            "8",
            "--targets",
            "16,24",
            "--save-models",
            "--out",
            dir.path().join(name).to_str().unwrap(),
        ]);
        assert_exit(&out, 0);
    }
    assert_eq!(read_dir_blobs(&dir.path().join("p1")), read_dir_blobs(&dir.path().join("p2")));
    // Model files byte-identical.
    let m1 = std::fs::read(dir.path().join("p1/models/layers.0.w.r1m")).unwrap();
    let m2 = std::fs::read(dir.path().join("p2/models/layers.0.w.r1m")).unwrap();
    assert_eq!(m1, m2);
    // Summaries agree on everything except the wall time.
    let mut s1: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("p1/summary.json")).unwrap())
            .unwrap();
    let mut s2: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("p2/summary.json")).unwrap())
            .unwrap();
    s1["wall_time_seconds"] = 0.into();
    s2["wall_time_seconds"] = 0.into();
    assert_eq!(s1, s2);
}

#[test]
fn predicted_output_is_an_openable_series() {
    let dir = tempfile::tempdir().unwrap();
    let series = synth_series(dir.path(), 0.0);
    let pred = dir.path().join("pred");
    let out = run(&[
        "extrapolate",
        "--series",
        series.to_str().unwrap(),
        "--t-cut",
        "8",
        "--targets",
        "16",
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let reopened = relex_core::open_series(&pred).unwrap();
    assert_eq!(reopened.observed_steps(), &[16]);
    // Inspect accepts it too.
    let out = run(&["inspect", "--series", pred.to_str().unwrap()]);
    assert_exit(&out, 0);
}

#[test]
fn observed_target_on_exact_plant_reproduces_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let series_path = synth_series(dir.path(), 0.0);
    let pred = dir.path().join("pred");
    let out = run(&[
        "extrapolate",
        "--series",
        series_path.to_str().unwrap(),
        "--t-cut",
        "8",
        "--targets",
        "5",
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let input = relex_core::open_series(&series_path).unwrap();
    let output = relex_core::open_series(&pred).unwrap();
    for name in ["layers.0.w", "layers.1.w"] {
        let want = relex_core::read_tensor(&input, 5, name).unwrap();
        let got = relex_core::read_tensor(&output, 5, name).unwrap();
        let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-9 * scale, "{name}: {g} vs {w}");
        }
    }
}

#[test]
fn sweep_grid_flags_reconstruction_cells() {
    let dir = tempfile::tempdir().unwrap();
    let series = synth_series(dir.path(), 0.1);
    let out_dir = dir.path().join("sweep");
    let out = run(&[
        "sweep",
        "--series",
        series.to_str().unwrap(),
        "--t-cuts",
        "4,8",
        "--targets",
        "6,16",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let grid = std::fs::read_to_string(out_dir.join("grid.csv")).unwrap();
    assert!(grid.contains("4,6,extrapolation,ok"), "{grid}");
    assert!(grid.contains("8,6,reconstruction,ok"), "{grid}");
    assert!(grid.contains("8,16,extrapolation,ok"), "{grid}");
}

#[test]
fn sweep_records_failed_cells_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let series = synth_series(dir.path(), 0.1);
    let out_dir = dir.path().join("sweep");
    // t_cut 1 has a single observed step: too small for a line fit.
    let out = run(&[
        "sweep",
        "--series",
        series.to_str().unwrap(),
        "--t-cuts",
        "1,8",
        "--targets",
        "16",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let grid = std::fs::read_to_string(out_dir.join("grid.csv")).unwrap();
    assert!(grid.contains("1,16,extrapolation,failed:"), "{grid}");
    assert!(grid.contains("8,16,extrapolation,ok"), "{grid}");
    assert!(out_dir.join("tcut_8/step_16").is_dir());
}

#[test]
fn diagnose_rank5_reports_component_variances() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "rng_seed": 21, "planted_direction_seed": 22,
        "t_values": (1u64..=10).collect::<Vec<_>>(),
        "noise": {"kind": "extra_components", "count": 4},
        "noise_scale": 0.2,
        "tensors": [{"name": "w", "shape": [16, 16], "slope": 0.5, "intercept": 0.25}]
    });
    let cfg_path = dir.path().join("plant.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let series = dir.path().join("series");
    assert_exit(
        &run(&["synth", "--config", cfg_path.to_str().unwrap(), "--out", series.to_str().unwrap()]),
        0,
    );
    let diag = dir.path().join("diag");
    let out = run(&[
        "diagnose",
        "--series",
        series.to_str().unwrap(),
        "--t-cut",
        "10",
        "--rank",
        "5",
        "--out",
        diag.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(diag.join("explained_variance.csv")).unwrap();
    let first = csv.lines().nth(1).unwrap();
    let fields: Vec<&str> = first.split(',').collect();
    assert_eq!(fields[0], "w");
    assert_eq!(fields[1], "1");
    let ev1: f64 = fields[3].parse().unwrap();
    assert!(
        ev1 > 0.6 && ev1 < 0.95,
        "component-1 explained variance {ev1} outside the planted energy budget"
    );
    assert_eq!(csv.lines().count(), 6, "one header plus five components");
}

#[test]
fn ablation_flags_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let series = synth_series(dir.path(), 0.1);
    for (name, extra) in [("poly", vec!["--fit", "poly3"]), ("rank2", vec!["--rank", "2"])] {
        let out_dir = dir.path().join(name);
        let mut args = vec![
            "extrapolate",
            "--series",
            series.to_str().unwrap(),
            "--t-cut",
            "8",
            "--targets",
            "16",
            "--out",
        ];
        let out_str = out_dir.to_str().unwrap().to_string();
        args.push(&out_str);
        args.extend(extra.iter().copied());
        assert_exit(&run(&args), 0);
        assert!(out_dir.join("step_16").is_dir());
    }
}

#[test]
fn degenerate_rank_request_exits_3() {
    // Exact rank-1 plant: asking for two components is a numerical
    // failure, not a usage error.
    let dir = tempfile::tempdir().unwrap();
    let series = synth_series(dir.path(), 0.0);
    let out = run(&[
        "extrapolate",
        "--series",
        series.to_str().unwrap(),
        "--t-cut",
        "8",
        "--targets",
        "16",
        "--rank",
        "2",
        "--out",
        dir.path().join("pred").to_str().unwrap(),
    ]);
    assert_exit(&out, 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("tensor"), "offending tensor not named: {stderr}");
}

#[test]
fn align_zero_prediction_yields_sentinels() {
    let dir = tempfile::tempdir().unwrap();
    let series = synth_series(dir.path(), 0.0);
    // A "prediction" that still sits at the base: expo with alpha = -1.
    let frozen = dir.path().join("frozen");
    let out = run(&[
        "extrapolate",
        "--series",
        series.to_str().unwrap(),
        "--t-cut",
        "8",
        "--targets",
        "5",
        "--method",
        "expo",
        "--alpha",
        "-1",
        "--out",
        frozen.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let align_out = dir.path().join("align");
    let out = run(&[
        "align",
        "--predicted",
        frozen.to_str().unwrap(),
        "--actual",
        series.to_str().unwrap(),
        "--base-step",
        "0",
        "--steps",
        "5",
        "--out",
        align_out.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(align_out.join("alignment.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[2], "nan", "cosine sentinel in {line}");
        assert_eq!(fields[3], "0.0000000000000000e0", "zero ratio in {line}");
    }
}

#[test]
fn align_schema_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let series_a = synth_series(dir.path(), 0.0);
    // A second series with different tensor names.
    let cfg = serde_json::json!({
        "rng_seed": 1, "planted_direction_seed": 2,
        "t_values": [1, 2, 3, 4, 5, 6, 7, 8],
        "noise": {"kind": "none"}, "noise_scale": 0.0,
        "tensors": [{"name": "other.w", "shape": [8, 8], "slope": 0.5, "intercept": 0.25}]
    });
    let cfg_path = dir.path().join("other.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let series_b = dir.path().join("other_series");
    assert_exit(
        &run(&["synth", "--config", cfg_path.to_str().unwrap(), "--out", series_b.to_str().unwrap()]),
        0,
    );
    let out = run(&[
        "align",
        "--predicted",
        series_a.to_str().unwrap(),
        "--actual",
        series_b.to_str().unwrap(),
        "--base-step",
        "0",
        "--steps",
        "5",
        "--out",
        dir.path().join("align").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
}
