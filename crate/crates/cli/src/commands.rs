//! Subcommand implementations. Every command validates inputs (exit 2),
//! runs, and writes its outputs under `--out`; reports are sorted by
//! tensor name so repeated runs are byte-identical. The one exception is
//! `wall_time_seconds` in summary JSON, which is informational and not
//! covered by the determinism contract.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use relex_core::diagnostics::{
    alignment_csv, alignment_report, coefficient_csv, coefficient_dump, explained_variance_csv,
    linearity_csv, linearity_report, CoefficientDump,
};
use relex_core::extrapolate::save_rank1_model;
use relex_core::store::{open_series, CheckpointSeries, SeriesWriter, StepWriter};
use relex_core::synth::{plant_series, PlantConfig};
use relex_core::trajectory::build_trajectory;

use crate::driver::{run_tensors, Cell, Method, OnWindowError, TensorOutcome, WindowStats};
use crate::error::{CliError, CliResult};

fn write_text(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn sorted_tensor_names(series: &CheckpointSeries) -> Vec<String> {
    let mut names: Vec<String> = series.schema().iter().map(|t| t.name.clone()).collect();
    names.sort();
    names
}

fn validate_targets(targets: &[u64]) -> CliResult<()> {
    if targets.is_empty() {
        return Err(CliError::validation("at least one --targets step is required"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &t in targets {
        if t == 0 {
            return Err(CliError::validation("target steps must be positive"));
        }
        if !seen.insert(t) {
            return Err(CliError::validation(format!("duplicate target step {t}")));
        }
    }
    Ok(())
}

fn min_window(method: &Method) -> usize {
    match method {
        Method::Expo { .. } | Method::Weight { .. } => 1,
        _ => 2,
    }
}

// ---- inspect ----

#[derive(Serialize)]
struct InspectTensor {
    name: String,
    shape: Vec<usize>,
    dtype: relex_core::Dtype,
    element_count: usize,
}

#[derive(Serialize)]
struct InspectOut {
    root: PathBuf,
    base_step: u64,
    observed_steps: Vec<u64>,
    tensor_count: usize,
    total_elements: usize,
    tensors: Vec<InspectTensor>,
}

pub fn inspect(series_path: &Path) -> CliResult<()> {
    let series = open_series(series_path)?;
    let mut tensors: Vec<InspectTensor> = series
        .schema()
        .iter()
        .map(|t| InspectTensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: t.dtype,
            element_count: t.element_count(),
        })
        .collect();
    tensors.sort_by(|a, b| a.name.cmp(&b.name));
    let out = InspectOut {
        root: series_path.to_path_buf(),
        base_step: series.base_step(),
        observed_steps: series.observed_steps().to_vec(),
        tensor_count: tensors.len(),
        total_elements: tensors.iter().map(|t| t.element_count).sum(),
        tensors,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

// ---- synth ----

pub fn synth(config_path: &Path, out: &Path) -> CliResult<()> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::validation(format!("cannot read {}: {e}", config_path.display())))?;
    let cfg: PlantConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("bad plant config: {e}")))?;
    let (series, truth) = plant_series(&cfg, out)?;
    println!(
        "{}",
        serde_json::json!({
            "out": out,
            "tensors": truth.tensors.len(),
            "observed_steps": series.observed_steps(),
        })
    );
    Ok(())
}

// ---- diagnose ----

#[derive(Serialize)]
struct DiagnoseSummary {
    t_cut: u64,
    rank: usize,
    r2_threshold: f64,
    tensor_count: usize,
    fraction_r2_above_threshold: f64,
    skipped: Vec<String>,
}

pub fn diagnose(
    series_path: &Path,
    t_cut: u64,
    rank: usize,
    threshold: f64,
    out: &Path,
) -> CliResult<()> {
    if rank == 0 {
        return Err(CliError::validation("--rank must be at least 1"));
    }
    let series = open_series(series_path)?;
    let report = linearity_report(&series, t_cut, threshold)?;

    let mut dumps: Vec<CoefficientDump> = Vec::new();
    for name in sorted_tensor_names(&series) {
        if report.skipped.contains(&name) {
            continue;
        }
        let traj = build_trajectory(&series, &name, t_cut)?;
        dumps.push(coefficient_dump(&traj, rank).map_err(|e| CliError::from(e).for_tensor(&name))?);
    }

    fs::create_dir_all(out)?;
    write_text(&out.join("linearity.csv"), &linearity_csv(&report))?;
    write_text(&out.join("explained_variance.csv"), &explained_variance_csv(&dumps))?;
    write_text(&out.join("coefficients.csv"), &coefficient_csv(&dumps))?;
    write_json(
        &out.join("summary.json"),
        &DiagnoseSummary {
            t_cut,
            rank,
            r2_threshold: threshold,
            tensor_count: report.records.len(),
            fraction_r2_above_threshold: report.fraction_above,
            skipped: report.skipped.clone(),
        },
    )?;
    Ok(())
}

// ---- extrapolate ----

#[derive(Serialize)]
struct TensorSummary {
    tensor: String,
    #[serde(flatten)]
    stats: WindowStats,
}

#[derive(Serialize)]
struct ExtrapolateSummary {
    method: &'static str,
    t_cut: u64,
    targets: Vec<u64>,
    tensor_count: usize,
    skipped: Vec<String>,
    fraction_r2_above_098: Option<f64>,
    tensors: Vec<TensorSummary>,
    wall_time_seconds: f64,
}

pub struct ExtrapolateParams {
    pub series: PathBuf,
    pub t_cut: u64,
    pub targets: Vec<u64>,
    pub method: Method,
    pub workers: usize,
    pub save_models: bool,
    pub out: PathBuf,
}

/// Copy the base checkpoint into the output root so predicted series are
/// complete, openable series on their own.
fn copy_base(series: &CheckpointSeries, sw: &mut SeriesWriter) -> CliResult<()> {
    let mut writer = sw.step_writer(series.base_step())?;
    for spec in series.schema().to_vec() {
        writer.copy_tensor_raw(series, series.base_step(), &spec.name)?;
    }
    writer.finish()?;
    sw.register_step(series.base_step());
    Ok(())
}

fn validate_window(series: &CheckpointSeries, t_cut: u64, method: &Method) -> CliResult<()> {
    let have = series.observed_upto(t_cut).len();
    let need = min_window(method);
    if have < need {
        return Err(CliError::validation(format!(
            "method {} needs at least {need} observed steps at or below --t-cut {t_cut}, found {have}",
            method.name()
        )));
    }
    if let Method::Weight { t0 } = method {
        if !series.has_step(*t0) {
            return Err(CliError::validation(format!("--t0 {t0} is not a step of the series")));
        }
    }
    Ok(())
}

fn r2_fraction(outcomes: &[TensorOutcome], t_cut: u64) -> Option<f64> {
    let r2s: Vec<f64> =
        outcomes.iter().filter_map(|o| o.windows.get(&t_cut).and_then(|w| w.r_squared)).collect();
    if r2s.is_empty() {
        None
    } else {
        Some(r2s.iter().filter(|&&r| r > 0.98).count() as f64 / r2s.len() as f64)
    }
}

pub fn extrapolate(p: &ExtrapolateParams) -> CliResult<()> {
    let start = Instant::now();
    let series = open_series(&p.series)?;
    validate_targets(&p.targets)?;
    validate_window(&series, p.t_cut, &p.method)?;

    let mut sw = SeriesWriter::create(&p.out, series.schema().to_vec())?;
    copy_base(&series, &mut sw)?;
    let mut step_writers: Vec<StepWriter> =
        p.targets.iter().map(|&t| sw.step_writer(t)).collect::<Result<_, _>>()?;

    let names = sorted_tensor_names(&series);
    let outcomes = {
        let cells: Vec<Cell<'_>> = p
            .targets
            .iter()
            .zip(&step_writers)
            .map(|(&target, writer)| Cell { t_cut: p.t_cut, target, writer })
            .collect();
        run_tensors(&series, &names, &p.method, &cells, true, p.workers, OnWindowError::Propagate)?
    };

    for outcome in &outcomes {
        for (i, entry) in &outcome.entries {
            step_writers[*i].commit(entry.clone());
        }
    }
    for (writer, &target) in step_writers.into_iter().zip(&p.targets) {
        writer.finish()?;
        sw.register_step(target);
    }
    sw.finish(series.base_step())?;

    if p.save_models {
        let model_dir = p.out.join("models");
        for outcome in &outcomes {
            if let Some(model) = &outcome.model {
                save_rank1_model(model, &model_dir)?;
            }
        }
    }

    let summary = ExtrapolateSummary {
        method: p.method.name(),
        t_cut: p.t_cut,
        targets: p.targets.clone(),
        tensor_count: outcomes.len(),
        skipped: outcomes
            .iter()
            .filter(|o| o.skipped().is_some())
            .map(|o| o.name.clone())
            .collect(),
        fraction_r2_above_098: r2_fraction(&outcomes, p.t_cut),
        tensors: outcomes
            .iter()
            .map(|o| TensorSummary { tensor: o.name.clone(), stats: o.windows[&p.t_cut].clone() })
            .collect(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&p.out.join("summary.json"), &summary)?;
    Ok(())
}

// ---- sweep ----

pub struct SweepParams {
    pub series: PathBuf,
    pub t_cuts: Vec<u64>,
    pub targets: Vec<u64>,
    pub method: Method,
    pub workers: usize,
    pub use_cache: bool,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SweepCellSummary {
    method: &'static str,
    t_cut: u64,
    targets: Vec<u64>,
    skipped: Vec<String>,
    fraction_r2_above_098: Option<f64>,
    tensors: Vec<TensorSummary>,
}

pub fn sweep(p: &SweepParams) -> CliResult<()> {
    let series = open_series(&p.series)?;
    validate_targets(&p.targets)?;
    if p.t_cuts.is_empty() {
        return Err(CliError::validation("at least one --t-cuts value is required"));
    }
    let mut t_cuts = p.t_cuts.clone();
    t_cuts.sort_unstable();
    t_cuts.dedup();

    // Cutoffs whose window is too small become failed cells up front.
    let mut invalid: BTreeMap<u64, String> = BTreeMap::new();
    let valid: Vec<u64> = t_cuts
        .iter()
        .copied()
        .filter(|&c| match validate_window(&series, c, &p.method) {
            Ok(()) => true,
            Err(e) => {
                invalid.insert(c, e.to_string());
                false
            }
        })
        .collect();

    fs::create_dir_all(&p.out)?;
    let mut cut_writers: Vec<(u64, SeriesWriter, Vec<StepWriter>)> = Vec::new();
    for &c in &valid {
        let dir = p.out.join(format!("tcut_{c}"));
        let mut sw = SeriesWriter::create(&dir, series.schema().to_vec())?;
        copy_base(&series, &mut sw)?;
        let writers: Vec<StepWriter> =
            p.targets.iter().map(|&t| sw.step_writer(t)).collect::<Result<_, _>>()?;
        cut_writers.push((c, sw, writers));
    }

    let names = sorted_tensor_names(&series);
    let outcomes = {
        let mut cells = Vec::with_capacity(valid.len() * p.targets.len());
        for (c, _, writers) in &cut_writers {
            for (&target, writer) in p.targets.iter().zip(writers) {
                cells.push(Cell { t_cut: *c, target, writer });
            }
        }
        run_tensors(&series, &names, &p.method, &cells, p.use_cache, p.workers, OnWindowError::Capture)?
    };

    // A window error in any tensor fails every cell of that cutoff.
    let mut cut_failures: BTreeMap<u64, String> = invalid.clone();
    for outcome in &outcomes {
        for (&c, stats) in &outcome.windows {
            if let Some(err) = &stats.error {
                cut_failures
                    .entry(c)
                    .or_insert_with(|| format!("tensor {:?}: {err}", outcome.name));
            }
        }
    }

    for outcome in &outcomes {
        for (i, entry) in &outcome.entries {
            let (ci, ti) = (i / p.targets.len(), i % p.targets.len());
            cut_writers[ci].2[ti].commit(entry.clone());
        }
    }

    let mut rows: Vec<(u64, u64, String)> = Vec::new();
    for (c, sw, writers) in cut_writers {
        let failed = cut_failures.get(&c);
        if failed.is_none() {
            let mut sw = sw;
            for (writer, &target) in writers.into_iter().zip(&p.targets) {
                writer.finish()?;
                sw.register_step(target);
            }
            sw.finish(series.base_step())?;
            let summary = SweepCellSummary {
                method: p.method.name(),
                t_cut: c,
                targets: p.targets.clone(),
                skipped: outcomes
                    .iter()
                    .filter(|o| o.windows.get(&c).is_some_and(|w| w.skipped.is_some()))
                    .map(|o| o.name.clone())
                    .collect(),
                fraction_r2_above_098: r2_fraction(&outcomes, c),
                tensors: outcomes
                    .iter()
                    .filter_map(|o| {
                        o.windows.get(&c).map(|stats| TensorSummary {
                            tensor: o.name.clone(),
                            stats: stats.clone(),
                        })
                    })
                    .collect(),
            };
            write_json(&p.out.join(format!("tcut_{c}/summary.json")), &summary)?;
        }
        for &target in &p.targets {
            rows.push(grid_row(c, target, failed.map(String::as_str)));
        }
    }
    for (&c, err) in &invalid {
        for &target in &p.targets {
            rows.push(grid_row(c, target, Some(err)));
        }
    }
    rows.sort();
    let mut grid = String::from("t_cut,target,kind,status,path\n");
    for (_, _, row) in rows {
        grid.push_str(&row);
    }
    write_text(&p.out.join("grid.csv"), &grid)?;
    Ok(())
}

fn grid_row(t_cut: u64, target: u64, failure: Option<&str>) -> (u64, u64, String) {
    let kind = if target <= t_cut { "reconstruction" } else { "extrapolation" };
    let status = match failure {
        None => "ok".to_string(),
        Some(e) => format!("failed: {}", e.replace(',', ";")),
    };
    (t_cut, target, format!("{t_cut},{target},{kind},{status},tcut_{t_cut}/step_{target}\n"))
}

// ---- align ----

#[derive(Serialize)]
struct AlignStepSummary {
    step: u64,
    mean_cosine: f64,
    mean_norm_ratio: f64,
}

pub fn align(
    predicted_path: &Path,
    actual_path: &Path,
    base_step: u64,
    steps: &[u64],
    out: &Path,
) -> CliResult<()> {
    if steps.is_empty() {
        return Err(CliError::validation("at least one --steps value is required"));
    }
    let predicted = open_series(predicted_path)?;
    let actual = open_series(actual_path)?;
    let records = alignment_report(&predicted, &actual, base_step, steps)?;
    fs::create_dir_all(out)?;
    write_text(&out.join("alignment.csv"), &alignment_csv(&records))?;
    let summary: Vec<AlignStepSummary> = records
        .iter()
        .map(|r| AlignStepSummary {
            step: r.step,
            mean_cosine: r.mean_cosine,
            mean_norm_ratio: r.mean_norm_ratio,
        })
        .collect();
    write_json(&out.join("summary.json"), &summary)?;
    Ok(())
}
