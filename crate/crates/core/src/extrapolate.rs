//! Checkpoint reconstruction and extrapolation.
//!
//! The main path fits, per tensor, the dominant singular direction of the
//! observed delta trajectory and a line through its scalar coefficients,
//! then predicts any target step as `base + (a·T + b)·v1`. Rank-r
//! reconstruction, a per-element raw-space fit, higher-rank / polynomial
//! component fits for ablations, and the two-endpoint and per-checkpoint
//! baselines live here too.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{pairwise_dot, SplitMix64, DOT_BLOCK};
use crate::spectral::{
    gram_matrix, linear_fit, pls1_fit, poly_fit, project_coefficients, truncated_svd,
    truncated_svd_from_gram, LinearFit, PolyFit,
};
use crate::store::{
    for_each_tensor_block, read_tensor, BlobReader, CheckpointSeries, TensorSink,
};
use crate::trajectory::TrajectoryMatrix;

/// Fitted rank-1 artifact for one tensor: dominant direction, coefficient
/// series over the observed steps, and the line through it. Under the sign
/// convention the slope is non-negative (ties broken by the sign of the
/// last coefficient), which makes stored models comparable across tensors;
/// predictions are invariant to the flip since c·v is.
#[derive(Debug, Clone)]
pub struct Rank1Model {
    pub tensor_name: String,
    pub v1: Vec<f64>,
    pub sigma1: f64,
    pub fit: LinearFit,
    pub steps: Vec<u64>,
    pub coefficients: Vec<f64>,
}

impl Rank1Model {
    pub fn dim(&self) -> usize {
        self.v1.len()
    }

    /// Extrapolated coefficient at step `t`.
    pub fn coefficient_at(&self, t: u64) -> f64 {
        self.fit.eval(t as f64)
    }
}

/// Fit the rank-1 model of a trajectory. The coefficient series is the
/// projection ⟨m_t, v1⟩ of each delta row, and the line is fit over the
/// true optimizer-step values, not row ordinals.
pub fn fit_rank1(traj: &TrajectoryMatrix) -> Result<Rank1Model> {
    let gram = gram_matrix(traj)?;
    fit_rank1_from_gram(traj, &gram)
}

/// As [`fit_rank1`], reusing a precomputed Gram matrix.
pub fn fit_rank1_from_gram(traj: &TrajectoryMatrix, gram: &[Vec<f64>]) -> Result<Rank1Model> {
    if traj.len() < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: traj.len() });
    }
    let dec = truncated_svd_from_gram(traj, gram, 1)?;
    let mut v1 = dec.right_vectors.into_iter().next().unwrap();
    let mut coefficients: Vec<f64> =
        project_coefficients(traj, std::slice::from_ref(&v1))?.into_iter().map(|r| r[0]).collect();
    let ts: Vec<f64> = traj.steps().iter().map(|&t| t as f64).collect();
    let mut fit = linear_fit(&ts, &coefficients)?;

    let flip = fit.a < 0.0 || (fit.a == 0.0 && coefficients.last().is_some_and(|&c| c < 0.0));
    if flip {
        for x in v1.iter_mut() {
            *x = -*x;
        }
        for c in coefficients.iter_mut() {
            *c = -*c;
        }
        // The least-squares line of -c is exactly (-a, -b); R² unchanged.
        fit = LinearFit { a: -fit.a + 0.0, b: -fit.b + 0.0, r_squared: fit.r_squared };
    }

    Ok(Rank1Model {
        tensor_name: traj.tensor_name().to_string(),
        v1,
        sigma1: dec.singular_values[0],
        fit,
        steps: traj.steps().to_vec(),
        coefficients,
    })
}

/// `base + (a·T + b)·v1`.
pub fn predict(model: &Rank1Model, base: &[f64], target: u64) -> Result<Vec<f64>> {
    if base.len() != model.v1.len() {
        return Err(Error::DimensionMismatch(format!(
            "base has {} elements, model direction has {}",
            base.len(),
            model.v1.len()
        )));
    }
    let c = model.coefficient_at(target);
    Ok(base.iter().zip(&model.v1).map(|(b, v)| b + c * v).collect())
}

/// Streaming variant of [`predict`]: reads the base from the series in
/// blocks and pushes the prediction into a sink, never materializing the
/// base tensor.
pub fn predict_into(
    model: &Rank1Model,
    series: &CheckpointSeries,
    target: u64,
    sink: &mut TensorSink,
) -> Result<()> {
    let c = model.coefficient_at(target);
    let mut out = Vec::with_capacity(DOT_BLOCK);
    let mut result = Ok(());
    for_each_tensor_block(series, series.base_step(), &model.tensor_name, |offset, block| {
        if result.is_err() {
            return;
        }
        out.clear();
        out.extend(
            block.iter().zip(&model.v1[offset..offset + block.len()]).map(|(b, v)| b + c * v),
        );
        if let Err(e) = sink.push(&out) {
            result = Err(e);
        }
    })?;
    result
}

/// Rank-r reconstruction of one observed row: `base + Σ_k C[t][k]·v_k`.
pub fn reconstruct_rank_r(
    traj: &TrajectoryMatrix,
    base: &[f64],
    r: usize,
    step_index: usize,
) -> Result<Vec<f64>> {
    if step_index >= traj.len() {
        return Err(Error::BadStepIndex { index: step_index, rows: traj.len() });
    }
    if base.len() != traj.dim() {
        return Err(Error::DimensionMismatch(format!(
            "base has {} elements, trajectory has {}",
            base.len(),
            traj.dim()
        )));
    }
    let dec = truncated_svd(traj, r)?;
    let mut out = base.to_vec();
    for k in 0..r {
        let c = dec.coefficients[step_index][k];
        for (o, v) in out.iter_mut().zip(&dec.right_vectors[k]) {
            *o += c * v;
        }
    }
    Ok(out)
}

/// Per-element least-squares weights such that the fitted line evaluated at
/// `target` is Σ_t w_t·m_t for every element independently.
fn raw_weights(steps: &[u64], target: u64) -> Result<Vec<f64>> {
    let n = steps.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let ts: Vec<f64> = steps.iter().map(|&t| t as f64).collect();
    let t_mean: f64 = ts.iter().sum::<f64>() / n as f64;
    let s_tt: f64 = ts.iter().map(|t| (t - t_mean) * (t - t_mean)).sum();
    if s_tt == 0.0 {
        return Err(Error::DegenerateAbscissa);
    }
    let dt = target as f64 - t_mean;
    Ok(ts.iter().map(|t| 1.0 / n as f64 + dt * (t - t_mean) / s_tt).collect())
}

/// Raw-space ablation: fit `c(t) = a·t + b` per element over all observed
/// steps and evaluate at `target`, added to the base. This keeps the full
/// prefix line fit and changes only the space, unlike the two-endpoint
/// baseline.
pub fn extrapolate_raw(traj: &TrajectoryMatrix, base: &[f64], target: u64) -> Result<Vec<f64>> {
    if base.len() != traj.dim() {
        return Err(Error::DimensionMismatch(format!(
            "base has {} elements, trajectory has {}",
            base.len(),
            traj.dim()
        )));
    }
    let weights = raw_weights(traj.steps(), target)?;
    let mut out = base.to_vec();
    traj.for_each_block(|offset, rows| {
        let dst = &mut out[offset..offset + rows[0].len()];
        for (row, &w) in rows.iter().zip(&weights) {
            for (o, x) in dst.iter_mut().zip(*row) {
                *o += w * x;
            }
        }
    })?;
    Ok(out)
}

/// Streaming variant of [`extrapolate_raw`]; holds one d-length buffer.
pub fn extrapolate_raw_into(
    traj: &TrajectoryMatrix,
    series: &CheckpointSeries,
    target: u64,
    sink: &mut TensorSink,
) -> Result<()> {
    let weights = raw_weights(traj.steps(), target)?;
    let mut delta = vec![0.0; traj.dim()];
    traj.for_each_block(|offset, rows| {
        let dst = &mut delta[offset..offset + rows[0].len()];
        for (row, &w) in rows.iter().zip(&weights) {
            for (o, x) in dst.iter_mut().zip(*row) {
                *o += w * x;
            }
        }
    })?;
    let mut out = Vec::with_capacity(DOT_BLOCK);
    let mut result = Ok(());
    for_each_tensor_block(series, series.base_step(), traj.tensor_name(), |offset, block| {
        if result.is_err() {
            return;
        }
        out.clear();
        out.extend(block.iter().zip(&delta[offset..offset + block.len()]).map(|(b, d)| b + d));
        if let Err(e) = sink.push(&out) {
            result = Err(e);
        }
    })?;
    result
}

/// Two-endpoint amplification: `theta_cut + alpha·(theta_cut − base)`.
pub fn expo(base: &[f64], theta_cut: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if base.len() != theta_cut.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} elements",
            base.len(),
            theta_cut.len()
        )));
    }
    Ok(base.iter().zip(theta_cut).map(|(b, c)| c + alpha * (c - b)).collect())
}

/// Two-endpoint linear extrapolation through `(t0, theta_t0)` and
/// `(t_cut, theta_cut)` evaluated at `target`.
pub fn weight_extrapolate(
    theta_t0: &[f64],
    theta_cut: &[f64],
    t0: u64,
    t_cut: u64,
    target: u64,
) -> Result<Vec<f64>> {
    if t_cut == t0 {
        return Err(Error::DegenerateInterval);
    }
    if theta_t0.len() != theta_cut.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} elements",
            theta_t0.len(),
            theta_cut.len()
        )));
    }
    let f = (target as f64 - t0 as f64) / (t_cut as f64 - t0 as f64);
    Ok(theta_t0.iter().zip(theta_cut).map(|(a, c)| a + f * (c - a)).collect())
}

/// Zip two blob streams of the same tensor through a combiner.
fn combine_two_into(
    series: &CheckpointSeries,
    step_a: u64,
    step_b: u64,
    name: &str,
    sink: &mut TensorSink,
    combine: impl Fn(f64, f64) -> f64,
) -> Result<()> {
    let mut ra = BlobReader::for_tensor(series, step_a, name)?;
    let mut rb = BlobReader::for_tensor(series, step_b, name)?;
    let mut ba = Vec::with_capacity(DOT_BLOCK);
    let mut bb = Vec::with_capacity(DOT_BLOCK);
    let mut out = Vec::with_capacity(DOT_BLOCK);
    while ra.next_block(&mut ba)?.is_some() {
        rb.next_block(&mut bb)?;
        out.clear();
        out.extend(ba.iter().zip(&bb).map(|(&a, &b)| combine(a, b)));
        sink.push(&out)?;
    }
    rb.next_block(&mut bb)?;
    Ok(())
}

/// Streaming expo over series storage.
pub fn expo_into(
    series: &CheckpointSeries,
    name: &str,
    cut_step: u64,
    alpha: f64,
    sink: &mut TensorSink,
) -> Result<()> {
    combine_two_into(series, series.base_step(), cut_step, name, sink, move |base, cut| {
        cut + alpha * (cut - base)
    })
}

/// Streaming two-endpoint extrapolation over series storage.
pub fn weight_extrapolate_into(
    series: &CheckpointSeries,
    name: &str,
    t0: u64,
    t_cut: u64,
    target: u64,
    sink: &mut TensorSink,
) -> Result<()> {
    if t_cut == t0 {
        return Err(Error::DegenerateInterval);
    }
    let f = (target as f64 - t0 as f64) / (t_cut as f64 - t0 as f64);
    combine_two_into(series, t0, t_cut, name, sink, move |a, c| a + f * (c - a))
}

/// Coefficient fit used by the component model ablations.
#[derive(Debug, Clone)]
pub enum CoefficientFit {
    Linear(LinearFit),
    Poly(PolyFit),
}

impl CoefficientFit {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            CoefficientFit::Linear(f) => f.eval(t),
            CoefficientFit::Poly(f) => f.eval(t),
        }
    }

    pub fn r_squared(&self) -> Option<f64> {
        match self {
            CoefficientFit::Linear(f) => Some(f.r_squared),
            CoefficientFit::Poly(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitKind {
    Linear,
    Poly(usize),
}

/// Rank-r extrapolation model for the ablation variants: one fitted
/// coefficient curve per retained component, all sharing the trajectory's
/// singular directions.
#[derive(Debug, Clone)]
pub struct ComponentModel {
    pub tensor_name: String,
    pub singular_values: Vec<f64>,
    pub right_vectors: Vec<Vec<f64>>,
    pub fits: Vec<CoefficientFit>,
    pub steps: Vec<u64>,
    /// Projected coefficient series, `[t][k]`.
    pub coefficients: Vec<Vec<f64>>,
}

/// Fit `rank` coefficient curves of the given kind.
pub fn fit_components(
    traj: &TrajectoryMatrix,
    rank: usize,
    kind: FitKind,
    gram: Option<&[Vec<f64>]>,
) -> Result<ComponentModel> {
    let owned;
    let gram = match gram {
        Some(g) => g,
        None => {
            owned = gram_matrix(traj)?;
            &owned
        }
    };
    let dec = truncated_svd_from_gram(traj, gram, rank)?;
    let singular_values = dec.singular_values;
    let mut right = dec.right_vectors;
    let mut coeffs = project_coefficients(traj, &right)?;
    let ts: Vec<f64> = traj.steps().iter().map(|&t| t as f64).collect();

    let mut fits = Vec::with_capacity(rank);
    for k in 0..rank {
        let mut series: Vec<f64> = coeffs.iter().map(|row| row[k]).collect();
        let probe = linear_fit(&ts, &series)?;
        let flip = probe.a < 0.0 || (probe.a == 0.0 && series.last().is_some_and(|&c| c < 0.0));
        if flip {
            for x in right[k].iter_mut() {
                *x = -*x;
            }
            for (row, c) in coeffs.iter_mut().zip(series.iter_mut()) {
                row[k] = -row[k];
                *c = -*c;
            }
        }
        let fit = match kind {
            FitKind::Linear => CoefficientFit::Linear(linear_fit(&ts, &series)?),
            FitKind::Poly(order) => CoefficientFit::Poly(poly_fit(&ts, &series, order)?),
        };
        fits.push(fit);
    }

    Ok(ComponentModel {
        tensor_name: traj.tensor_name().to_string(),
        singular_values,
        right_vectors: right,
        fits,
        steps: traj.steps().to_vec(),
        coefficients: coeffs,
    })
}

/// `base + Σ_k ĉ_k(target)·v_k`.
pub fn predict_components(model: &ComponentModel, base: &[f64], target: u64) -> Result<Vec<f64>> {
    let d = model.right_vectors.first().map_or(0, |v| v.len());
    if base.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "base has {} elements, model direction has {d}",
            base.len()
        )));
    }
    let mut out = base.to_vec();
    for (fit, v) in model.fits.iter().zip(&model.right_vectors) {
        let c = fit.eval(target as f64);
        for (o, x) in out.iter_mut().zip(v) {
            *o += c * x;
        }
    }
    Ok(out)
}

/// Streaming variant of [`predict_components`].
pub fn predict_components_into(
    model: &ComponentModel,
    series: &CheckpointSeries,
    target: u64,
    sink: &mut TensorSink,
) -> Result<()> {
    let cs: Vec<f64> = model.fits.iter().map(|f| f.eval(target as f64)).collect();
    let mut out = Vec::with_capacity(DOT_BLOCK);
    let mut result = Ok(());
    for_each_tensor_block(series, series.base_step(), &model.tensor_name, |offset, block| {
        if result.is_err() {
            return;
        }
        out.clear();
        out.extend(block.iter().enumerate().map(|(i, &b)| {
            let mut acc = b;
            for (c, v) in cs.iter().zip(&model.right_vectors) {
                acc += c * v[offset + i];
            }
            acc
        }));
        if let Err(e) = sink.push(&out) {
            result = Err(e);
        }
    })?;
    result
}

const POWER_ITER_SEED: u64 = 0x52_4C_58_50_4F_57_45_52;
const POWER_ITER_MAX: usize = 1000;
const POWER_ITER_TOL: f64 = 1e-10;

/// Dominant singular triple of a dense row-major matrix by power iteration
/// on the alternating products, with a fixed-seed random start.
pub fn top_singular_triple(a: &[f64], rows: usize, cols: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    assert_eq!(a.len(), rows * cols);
    if a.iter().all(|&x| x == 0.0) {
        return Ok((0.0, vec![0.0; rows], vec![0.0; cols]));
    }
    let mut rng = SplitMix64::new(POWER_ITER_SEED);
    let mut u: Vec<f64> = (0..rows).map(|_| rng.next_gaussian()).collect();
    let un = pairwise_dot(&u, &u).sqrt();
    for x in u.iter_mut() {
        *x /= un;
    }
    let mut v = vec![0.0; cols];
    let mut sigma_prev = 0.0;
    let mut change = f64::INFINITY;
    for _ in 0..POWER_ITER_MAX {
        // v ∝ Aᵀu
        for x in v.iter_mut() {
            *x = 0.0;
        }
        for (i, ui) in u.iter().enumerate() {
            if *ui == 0.0 {
                continue;
            }
            let row = &a[i * cols..(i + 1) * cols];
            for (vx, ax) in v.iter_mut().zip(row) {
                *vx += ui * ax;
            }
        }
        let vn = pairwise_dot(&v, &v).sqrt();
        if vn == 0.0 {
            // Start vector was orthogonal to the row space; redraw.
            for x in u.iter_mut() {
                *x = rng.next_gaussian();
            }
            let n = pairwise_dot(&u, &u).sqrt();
            for x in u.iter_mut() {
                *x /= n;
            }
            continue;
        }
        for x in v.iter_mut() {
            *x /= vn;
        }
        // u ∝ Av, σ = ‖Av‖
        let mut sigma_sq = 0.0;
        for (i, ui) in u.iter_mut().enumerate() {
            let row = &a[i * cols..(i + 1) * cols];
            let z: f64 = row.iter().zip(&v).map(|(x, y)| x * y).sum();
            *ui = z;
            sigma_sq += z * z;
        }
        let sigma = sigma_sq.sqrt();
        for x in u.iter_mut() {
            *x /= sigma;
        }
        change = (sigma - sigma_prev).abs() / sigma;
        if change <= POWER_ITER_TOL {
            return Ok((sigma, u, v));
        }
        sigma_prev = sigma;
    }
    Err(Error::PowerIterationStall { change, iters: POWER_ITER_MAX })
}

/// Per-checkpoint rank-1 baseline: each observed delta gets its own top
/// singular triple of the unflattened 2-D matrix; the left factors scaled
/// by their singular values regress on normalized progress via PLS1, the
/// right basis is taken from the last observed step, and the target is the
/// PLS inversion at progress 1.
pub fn alpharl_extrapolate(
    series: &CheckpointSeries,
    name: &str,
    t_cut: u64,
) -> Result<Vec<f64>> {
    let spec = series.tensor_spec(name)?.clone();
    if spec.shape.len() != 2 {
        return Err(Error::NotAMatrix(name.to_string()));
    }
    let (rows, cols) = (spec.shape[0], spec.shape[1]);
    let steps = series.observed_upto(t_cut);
    if steps.len() < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: steps.len() });
    }

    let base = read_tensor(series, series.base_step(), name)?;
    let mut triples = Vec::with_capacity(steps.len());
    for &step in &steps {
        let mut delta = read_tensor(series, step, name)?;
        for (d, b) in delta.iter_mut().zip(&base) {
            *d -= b;
        }
        triples.push(top_singular_triple(&delta, rows, cols)?);
    }

    let v_ref = triples.last().unwrap().2.clone();
    let mut features = Vec::with_capacity(steps.len());
    for (sigma, mut u, v) in triples {
        let align = pairwise_dot(&v, &v_ref);
        let sign = if align < 0.0 { -1.0 } else { 1.0 };
        for x in u.iter_mut() {
            *x *= sign * sigma;
        }
        features.push(u);
    }
    let progress: Vec<f64> = steps.iter().map(|&t| t as f64 / t_cut as f64).collect();
    let pls = pls1_fit(&features, &progress)?;
    let left = pls.invert_x(1.0)?;

    let mut out = base;
    for i in 0..rows {
        let li = left[i];
        let dst = &mut out[i * cols..(i + 1) * cols];
        for (o, v) in dst.iter_mut().zip(&v_ref) {
            *o += li * v;
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct Rank1Sidecar {
    tensor: String,
    step_count: usize,
    dim: usize,
    a: f64,
    b: f64,
    r_squared: f64,
    sigma1: f64,
}

/// Persist a fitted model as `<dir>/<tensor>.r1m` (little-endian f64:
/// steps, coefficients, a, b, R², σ₁, v1) plus a JSON sidecar of the
/// scalars. Lets later runs predict new targets without re-running the
/// SVD.
pub fn save_rank1_model(model: &Rank1Model, dir: impl AsRef<Path>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.as_ref())?;
    let path = dir.as_ref().join(format!("{}.r1m", model.tensor_name));
    let mut w = BufWriter::new(File::create(&path)?);
    let write_f64s = |w: &mut BufWriter<File>, xs: &[f64]| -> Result<()> {
        for &x in xs {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    };
    let steps_f64: Vec<f64> = model.steps.iter().map(|&s| s as f64).collect();
    write_f64s(&mut w, &steps_f64)?;
    write_f64s(&mut w, &model.coefficients)?;
    write_f64s(&mut w, &[model.fit.a, model.fit.b, model.fit.r_squared, model.sigma1])?;
    write_f64s(&mut w, &model.v1)?;
    w.flush()?;

    let sidecar = Rank1Sidecar {
        tensor: model.tensor_name.clone(),
        step_count: model.steps.len(),
        dim: model.v1.len(),
        a: model.fit.a,
        b: model.fit.b,
        r_squared: model.fit.r_squared,
        sigma1: model.sigma1,
    };
    let json_path = dir.as_ref().join(format!("{}.r1m.json", model.tensor_name));
    let mut jw = BufWriter::new(File::create(json_path)?);
    serde_json::to_writer_pretty(&mut jw, &sidecar)?;
    jw.flush()?;
    Ok(path)
}

/// Load a model saved by [`save_rank1_model`].
pub fn load_rank1_model(dir: impl AsRef<Path>, tensor: &str) -> Result<Rank1Model> {
    let sidecar_path = dir.as_ref().join(format!("{tensor}.r1m.json"));
    let sidecar: Rank1Sidecar =
        serde_json::from_reader(BufReader::new(File::open(sidecar_path)?))?;

    let path = dir.as_ref().join(format!("{tensor}.r1m"));
    let mut r = BufReader::new(File::open(path)?);
    let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let steps: Vec<u64> = read_f64s(sidecar.step_count)?.iter().map(|&s| s as u64).collect();
    let coefficients = read_f64s(sidecar.step_count)?;
    let scalars = read_f64s(4)?;
    let v1 = read_f64s(sidecar.dim)?;
    Ok(Rank1Model {
        tensor_name: sidecar.tensor,
        v1,
        sigma1: scalars[3],
        fit: LinearFit { a: scalars[0], b: scalars[1], r_squared: scalars[2] },
        steps,
        coefficients,
    })
}
