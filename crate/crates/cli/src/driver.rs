//! Per-tensor prediction engine shared by `extrapolate` and `sweep`.
//!
//! Work is split by tensor: each tensor runs its whole pipeline (build
//! window, fit, predict every cell) and writes its own blobs through
//! independent sinks, so worker count changes scheduling but never bytes.
//! Manifest entries come back to the caller, which commits them in schema
//! order. With the Gram cache on, a tensor computes one Gram matrix at the
//! largest cutoff and reuses leading blocks for the smaller cutoffs; the
//! blocked accumulation makes those prefixes bit-identical to a direct
//! computation, so cached and uncached sweeps emit identical checkpoints.

use std::collections::BTreeMap;

use rayon::prelude::*;

use relex_core::extrapolate::{
    alpharl_extrapolate, expo_into, extrapolate_raw_into, fit_components, fit_rank1_from_gram,
    predict_components_into, predict_into, weight_extrapolate_into, CoefficientFit, FitKind,
    Rank1Model,
};
use relex_core::numeric::DOT_BLOCK;
use relex_core::spectral::gram_matrix;
use relex_core::store::{CheckpointSeries, ManifestTensor, StepWriter};
use relex_core::trajectory::{build_trajectory_with, TrajectoryMatrix, DENSE_THRESHOLD};
use relex_core::Error as CoreError;

use crate::error::{CliError, CliResult};

/// Element count below which delta rows are materialized instead of
/// streamed from disk. Overridable via `RELEX_DENSE_THRESHOLD` for memory
/// experiments; dense and streamed passes produce identical bits.
fn dense_threshold() -> usize {
    use std::sync::OnceLock;
    static THRESHOLD: OnceLock<usize> = OnceLock::new();
    *THRESHOLD.get_or_init(|| {
        std::env::var("RELEX_DENSE_THRESHOLD")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(DENSE_THRESHOLD)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Relex { rank: usize, fit: FitKind },
    Raw,
    Expo { alpha: f64 },
    Weight { t0: u64 },
    AlphaRl,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Relex { .. } => "relex",
            Method::Raw => "raw",
            Method::Expo { .. } => "expo",
            Method::Weight { .. } => "weight",
            Method::AlphaRl => "alpharl",
        }
    }
}

/// One output checkpoint to fill: a (cutoff, target) pair and the step
/// writer owning its directory.
pub struct Cell<'a> {
    pub t_cut: u64,
    pub target: u64,
    pub writer: &'a StepWriter,
}

/// On window-level failures: fail the whole run (`extrapolate`) or record
/// the failure and keep going (`sweep`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnWindowError {
    Propagate,
    Capture,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct WindowStats {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_squared: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intercept: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma1: Option<f64>,
}

impl WindowStats {
    fn skipped(reason: &str) -> Self {
        WindowStats { skipped: Some(reason.to_string()), ..Default::default() }
    }
}

pub struct TensorOutcome {
    pub name: String,
    /// Per-cutoff fit statistics, skip reason, or captured error.
    pub windows: BTreeMap<u64, WindowStats>,
    /// (cell index, manifest entry) pairs to commit.
    pub entries: Vec<(usize, ManifestTensor)>,
    /// Fitted rank-1 model, when the method produces one (last window).
    pub model: Option<Rank1Model>,
}

impl TensorOutcome {
    fn new(name: &str) -> Self {
        TensorOutcome {
            name: name.to_string(),
            windows: BTreeMap::new(),
            entries: Vec::new(),
            model: None,
        }
    }

    /// Skip reason when every window was skipped for the same reason.
    pub fn skipped(&self) -> Option<&str> {
        let first = self.windows.values().next()?.skipped.as_deref()?;
        self.windows
            .values()
            .all(|w| w.skipped.as_deref() == Some(first))
            .then_some(first)
    }
}

/// Run every tensor through the method over all cells, with `workers`
/// threads. Outcomes come back in input-name order.
pub fn run_tensors(
    series: &CheckpointSeries,
    names: &[String],
    method: &Method,
    cells: &[Cell<'_>],
    use_cache: bool,
    workers: usize,
    on_error: OnWindowError,
) -> CliResult<Vec<TensorOutcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::validation(format!("worker pool: {e}")))?;
    let results: Vec<CliResult<TensorOutcome>> = pool.install(|| {
        names
            .par_iter()
            .map(|name| {
                process_tensor(series, name, method, cells, use_cache, on_error)
                    .map_err(|e| e.for_tensor(name))
            })
            .collect()
    });
    results.into_iter().collect()
}

type WindowEntries = Vec<(usize, ManifestTensor)>;

fn copy_base_entries(
    series: &CheckpointSeries,
    name: &str,
    cells: &[Cell<'_>],
    indices: &[usize],
) -> CliResult<WindowEntries> {
    let mut entries = Vec::with_capacity(indices.len());
    for &i in indices {
        let entry = cells[i].writer.copy_tensor_entry(series, series.base_step(), name)?;
        entries.push((i, entry));
    }
    Ok(entries)
}

fn write_vector(cell: &Cell<'_>, name: &str, values: &[f64]) -> CliResult<ManifestTensor> {
    let mut sink = cell.writer.tensor_sink(name)?;
    for chunk in values.chunks(DOT_BLOCK) {
        sink.push(chunk)?;
    }
    Ok(sink.finish()?)
}

fn process_tensor(
    series: &CheckpointSeries,
    name: &str,
    method: &Method,
    cells: &[Cell<'_>],
    use_cache: bool,
    on_error: OnWindowError,
) -> CliResult<TensorOutcome> {
    let mut by_cut: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, cell) in cells.iter().enumerate() {
        by_cut.entry(cell.t_cut).or_default().push(i);
    }

    // With the cache on, one trajectory and one Gram matrix at the largest
    // cutoff serve every window as prefixes.
    let needs_trajectory = matches!(method, Method::Relex { .. } | Method::Raw);
    let cached: Option<(TrajectoryMatrix, Vec<Vec<f64>>)> = if use_cache && needs_trajectory {
        let t_max = *by_cut.keys().last().unwrap();
        let traj = build_trajectory_with(series, name, t_max, dense_threshold())?;
        let gram = gram_matrix(&traj)?;
        Some((traj, gram))
    } else {
        None
    };

    let mut outcome = TensorOutcome::new(name);
    for (&t_cut, indices) in &by_cut {
        let result = run_window(series, name, method, &cached, t_cut, indices, cells);
        match result {
            Ok((stats, entries, model)) => {
                outcome.windows.insert(t_cut, stats);
                outcome.entries.extend(entries);
                if model.is_some() {
                    outcome.model = model;
                }
            }
            Err(e) if on_error == OnWindowError::Capture => {
                outcome.windows.insert(
                    t_cut,
                    WindowStats { error: Some(e.to_string()), ..Default::default() },
                );
            }
            Err(e) => return Err(e),
        }
    }
    Ok(outcome)
}

fn run_window(
    series: &CheckpointSeries,
    name: &str,
    method: &Method,
    cached: &Option<(TrajectoryMatrix, Vec<Vec<f64>>)>,
    t_cut: u64,
    indices: &[usize],
    cells: &[Cell<'_>],
) -> CliResult<(WindowStats, WindowEntries, Option<Rank1Model>)> {
    match method {
        Method::Relex { rank, fit } => {
            subspace_window(series, name, Some((*rank, *fit)), cached, t_cut, indices, cells)
        }
        Method::Raw => subspace_window(series, name, None, cached, t_cut, indices, cells),
        Method::Expo { alpha } => {
            let cut_step = last_observed(series, t_cut)?;
            let mut entries = Vec::new();
            for &i in indices {
                let mut sink = cells[i].writer.tensor_sink(name)?;
                expo_into(series, name, cut_step, *alpha, &mut sink)?;
                entries.push((i, sink.finish()?));
            }
            Ok((WindowStats::default(), entries, None))
        }
        Method::Weight { t0 } => {
            let cut_step = last_observed(series, t_cut)?;
            if *t0 >= cut_step {
                return Err(CliError::validation(format!(
                    "--t0 {t0} must precede the cutoff checkpoint {cut_step}"
                )));
            }
            let mut entries = Vec::new();
            for &i in indices {
                let mut sink = cells[i].writer.tensor_sink(name)?;
                weight_extrapolate_into(series, name, *t0, cut_step, cells[i].target, &mut sink)?;
                entries.push((i, sink.finish()?));
            }
            Ok((WindowStats::default(), entries, None))
        }
        Method::AlphaRl => {
            if series.tensor_spec(name)?.shape.len() != 2 {
                // Per-checkpoint matrix SVD needs a 2-D tensor; others
                // ride along unchanged.
                let entries = copy_base_entries(series, name, cells, indices)?;
                return Ok((WindowStats::skipped("not_a_matrix"), entries, None));
            }
            match alpharl_extrapolate(series, name, t_cut) {
                Ok(pred) => {
                    let mut entries = Vec::new();
                    for &i in indices {
                        entries.push((i, write_vector(&cells[i], name, &pred)?));
                    }
                    Ok((WindowStats::default(), entries, None))
                }
                Err(CoreError::DegenerateDirection) => {
                    // All-zero deltas: nothing to regress on.
                    let entries = copy_base_entries(series, name, cells, indices)?;
                    Ok((WindowStats::skipped("zero_delta"), entries, None))
                }
                Err(e) => Err(e.into()),
            }
        }
    }
}

/// Shared path for the trajectory-fit methods. `fit` is `Some((rank,
/// kind))` for the subspace fit and `None` for the raw per-element fit.
fn subspace_window(
    series: &CheckpointSeries,
    name: &str,
    fit: Option<(usize, FitKind)>,
    cached: &Option<(TrajectoryMatrix, Vec<Vec<f64>>)>,
    t_cut: u64,
    indices: &[usize],
    cells: &[Cell<'_>],
) -> CliResult<(WindowStats, WindowEntries, Option<Rank1Model>)> {
    let (traj, gram) = match cached {
        Some((traj_full, gram_full)) => {
            let k = traj_full.steps().iter().filter(|&&s| s <= t_cut).count();
            if k == 0 {
                return Err(CoreError::EmptyWindow(t_cut).into());
            }
            let gram: Vec<Vec<f64>> = gram_full[..k].iter().map(|row| row[..k].to_vec()).collect();
            (traj_full.prefix(k), gram)
        }
        None => {
            let traj = build_trajectory_with(series, name, t_cut, dense_threshold())?;
            let gram = gram_matrix(&traj)?;
            (traj, gram)
        }
    };

    let trace: f64 = (0..traj.len()).map(|i| gram[i][i]).sum();
    if trace == 0.0 {
        let entries = copy_base_entries(series, name, cells, indices)?;
        return Ok((WindowStats::skipped("zero_delta"), entries, None));
    }

    let mut entries = Vec::new();
    match fit {
        Some((1, FitKind::Linear)) => {
            let model = fit_rank1_from_gram(&traj, &gram)?;
            let stats = WindowStats {
                r_squared: Some(model.fit.r_squared),
                slope: Some(model.fit.a),
                intercept: Some(model.fit.b),
                sigma1: Some(model.sigma1),
                ..Default::default()
            };
            for &i in indices {
                let mut sink = cells[i].writer.tensor_sink(name)?;
                predict_into(&model, series, cells[i].target, &mut sink)?;
                entries.push((i, sink.finish()?));
            }
            Ok((stats, entries, Some(model)))
        }
        Some((rank, kind)) => {
            let model = fit_components(&traj, rank, kind, Some(&gram))?;
            let (r_squared, slope, intercept) = match &model.fits[0] {
                CoefficientFit::Linear(f) => (Some(f.r_squared), Some(f.a), Some(f.b)),
                CoefficientFit::Poly(_) => (None, None, None),
            };
            let stats = WindowStats {
                r_squared,
                slope,
                intercept,
                sigma1: Some(model.singular_values[0]),
                ..Default::default()
            };
            for &i in indices {
                let mut sink = cells[i].writer.tensor_sink(name)?;
                predict_components_into(&model, series, cells[i].target, &mut sink)?;
                entries.push((i, sink.finish()?));
            }
            Ok((stats, entries, None))
        }
        None => {
            for &i in indices {
                let mut sink = cells[i].writer.tensor_sink(name)?;
                extrapolate_raw_into(&traj, series, cells[i].target, &mut sink)?;
                entries.push((i, sink.finish()?));
            }
            Ok((WindowStats::default(), entries, None))
        }
    }
}

fn last_observed(series: &CheckpointSeries, t_cut: u64) -> CliResult<u64> {
    series
        .observed_upto(t_cut)
        .last()
        .copied()
        .ok_or_else(|| CoreError::EmptyWindow(t_cut).into())
}
