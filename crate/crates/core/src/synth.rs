//! Synthetic ground-truth series and independent numerical oracles.
//!
//! The generator plants, per tensor, a delta trajectory
//! `(a·t + b)·v + noise(t)` with a known unit direction and optional noise,
//! writing a normal checkpoint series plus a `ground_truth.json` the tests
//! compare against. Directions are random sign patterns on a power-of-four
//! support so their unit norm is exact in every storage dtype; with noise
//! off, planted values with short mantissas survive an f32 round trip
//! bit-exactly.
//!
//! The one-sided Jacobi SVD here shares no code with the Gram-matrix path
//! in [`crate::spectral`]; it exists to check that path.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Pairwise, SplitMix64, DOT_BLOCK};
use crate::store::{CheckpointSeries, Dtype, SeriesWriter, TensorSpec};

fn default_dtype() -> Dtype {
    Dtype::F32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub slope: f64,
    pub intercept: f64,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
    /// Overrides the config-level noise scale for this tensor.
    #[serde(default)]
    pub noise_scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    /// Exact planted line, bit-reproducible after one narrowing.
    None,
    /// Per-step i.i.d. noise projected orthogonal to the planted direction,
    /// scaled to `noise_scale` of the signal amplitude |a·t + b|.
    OrthogonalIid,
    /// Per-step i.i.d. noise, not projected; contaminates the coefficient.
    FullIid,
    /// Additional orthogonal directions whose coefficients follow random
    /// walks, detrended against the signal coefficient series and rescaled
    /// so their total energy is `noise_scale` of the signal energy.
    ExtraComponents { count: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantConfig {
    pub rng_seed: u64,
    pub planted_direction_seed: u64,
    /// Observed steps, strictly increasing; the base is written at step 0.
    pub t_values: Vec<u64>,
    pub noise: NoiseKind,
    #[serde(default)]
    pub noise_scale: f64,
    pub tensors: Vec<PlantTensor>,
}

/// Tensors above this element count omit materialized direction vectors
/// from the ground truth; value-level oracle comparisons use small tensors.
pub const DIRECTION_DUMP_LIMIT: usize = 65_536;

/// What was actually planted, for oracle comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorTruth {
    /// Planted unit direction; empty above [`DIRECTION_DUMP_LIMIT`].
    pub direction: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub steps: Vec<u64>,
    /// Realized projection ⟨delta_t, v⟩ before narrowing.
    pub coefficients: Vec<f64>,
    /// Realized noise norm per step.
    pub noise_norms: Vec<f64>,
    /// Extra planted directions; empty above [`DIRECTION_DUMP_LIMIT`].
    pub extra_directions: Vec<Vec<f64>>,
    /// Realized extra-component coefficients, `[component][step]`.
    pub extra_coefficients: Vec<Vec<f64>>,
}

impl TensorTruth {
    /// The noise-free delta at step `t` (the base is all zeros, so this is
    /// also the planted parameter vector before narrowing).
    pub fn analytic_delta(&self, t: u64) -> Vec<f64> {
        assert!(
            !self.direction.is_empty(),
            "direction was not dumped for this tensor size; use a smaller tensor for value checks"
        );
        let c = self.slope * t as f64 + self.intercept;
        self.direction.iter().map(|&v| c * v).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub tensors: BTreeMap<String, TensorTruth>,
}

impl GroundTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Largest power of four not exceeding `d`.
fn pow4_floor(d: usize) -> usize {
    let mut b = 1usize;
    while b * 4 <= d {
        b *= 4;
    }
    b
}

/// Unit direction with entries ±1/√b on a b-sized support, zeros
/// elsewhere. b is a power of four, so 1/√b is a power of two and the norm
/// is exactly one. Stored compactly (seed, not values) so generation never
/// holds a full tensor; the sign stream is replayed on demand.
#[derive(Debug, Clone)]
struct CompactDirection {
    seed: u64,
    offset: usize,
    block: usize,
    scale: f64,
}

impl CompactDirection {
    fn new(seed: u64, offset: usize, block: usize) -> Self {
        Self { seed, offset, block, scale: 1.0 / (block as f64).sqrt() }
    }

    fn materialize(&self, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        let mut cursor = self.cursor();
        cursor.fill(0, &mut v);
        v
    }

    fn cursor(&self) -> DirectionCursor<'_> {
        DirectionCursor { dir: self, rng: SplitMix64::new(self.seed), next: self.offset }
    }
}

/// Sequential reader over a compact direction; chunks must be requested in
/// ascending order so the sign stream advances once per element.
struct DirectionCursor<'a> {
    dir: &'a CompactDirection,
    rng: SplitMix64,
    next: usize,
}

impl DirectionCursor<'_> {
    fn fill(&mut self, at: usize, out: &mut [f64]) {
        out.fill(0.0);
        let lo = at.max(self.dir.offset);
        let hi = (at + out.len()).min(self.dir.offset + self.dir.block);
        if lo >= hi {
            return;
        }
        assert!(lo >= self.next, "direction cursor must advance monotonically");
        for _ in self.next..lo {
            self.rng.next_u64();
        }
        for i in lo..hi {
            out[i - at] = self.rng.next_sign() * self.dir.scale;
        }
        self.next = hi;
    }
}

fn stream_seed(base: u64, salt: u64) -> u64 {
    base.wrapping_add((salt + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

struct TensorPlan {
    spec: TensorSpec,
    slope: f64,
    intercept: f64,
    noise_scale: f64,
    direction: CompactDirection,
    extra_directions: Vec<CompactDirection>,
    noise_rng: SplitMix64,
    walk_state: Vec<f64>,
}

/// Generate a series under `out_path` and return it with its ground truth
/// (also written to `out_path/ground_truth.json`). Deterministic in the
/// config: same seeds, same bytes. Tensors are emitted in fixed-size
/// chunks with the i.i.d. noise stream replayed from a saved RNG state, so
/// generation never holds a full tensor in memory.
pub fn plant_series(
    cfg: &PlantConfig,
    out_path: impl AsRef<Path>,
) -> Result<(CheckpointSeries, GroundTruth)> {
    validate_config(cfg)?;
    let out_path = out_path.as_ref();

    let extra_count = match cfg.noise {
        NoiseKind::ExtraComponents { count } => count,
        _ => 0,
    };

    let mut plans = Vec::with_capacity(cfg.tensors.len());
    for (idx, tensor) in cfg.tensors.iter().enumerate() {
        let spec = TensorSpec::new(tensor.name.clone(), tensor.shape.clone(), tensor.dtype);
        let d = spec.element_count();
        let block = pow4_floor(d / (extra_count + 1).max(1));
        if block == 0 {
            return Err(Error::InvalidConfig(format!(
                "tensor {:?} too small for {} components",
                tensor.name,
                extra_count + 1
            )));
        }
        let dir_seed = stream_seed(cfg.planted_direction_seed, idx as u64);
        let direction = CompactDirection::new(dir_seed, 0, block);
        let extra_directions: Vec<CompactDirection> = (0..extra_count)
            .map(|k| {
                CompactDirection::new(stream_seed(dir_seed, k as u64 + 1), (k + 1) * block, block)
            })
            .collect();
        plans.push(TensorPlan {
            spec,
            slope: tensor.slope,
            intercept: tensor.intercept,
            noise_scale: tensor.noise_scale.unwrap_or(cfg.noise_scale),
            direction,
            extra_directions,
            noise_rng: SplitMix64::new(stream_seed(cfg.rng_seed, idx as u64)),
            walk_state: vec![0.0; extra_count],
        });
    }

    // Extra-component walks are generated up front, detrended against the
    // signal coefficient series (raw walks trend, and any component along
    // c(t) would be soaked up by the leading singular direction), then
    // rescaled to the configured fraction of the realized signal energy.
    // After this the planted energy split is exactly the spectral split.
    let mut extra_coeffs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(plans.len());
    for plan in plans.iter_mut() {
        let mut per_tensor = vec![vec![0.0; cfg.t_values.len()]; extra_count];
        if extra_count > 0 {
            for (ti, _) in cfg.t_values.iter().enumerate() {
                for k in 0..extra_count {
                    plan.walk_state[k] += plan.noise_rng.next_gaussian();
                    per_tensor[k][ti] = plan.walk_state[k];
                }
            }
            let c_series: Vec<f64> =
                cfg.t_values.iter().map(|&t| plan.slope * t as f64 + plan.intercept).collect();
            let signal_energy: f64 = c_series.iter().map(|c| c * c).sum();
            if signal_energy > 0.0 {
                for walk in per_tensor.iter_mut() {
                    let proj: f64 =
                        walk.iter().zip(&c_series).map(|(e, c)| e * c).sum::<f64>() / signal_energy;
                    for (e, c) in walk.iter_mut().zip(&c_series) {
                        *e -= proj * c;
                    }
                }
            }
            let extra_energy: f64 = per_tensor.iter().flatten().map(|e| e * e).sum();
            if extra_energy > 0.0 {
                let factor = (plan.noise_scale * signal_energy / extra_energy).sqrt();
                for walk in per_tensor.iter_mut() {
                    for e in walk.iter_mut() {
                        *e *= factor;
                    }
                }
            }
        }
        extra_coeffs.push(per_tensor);
    }

    let schema: Vec<TensorSpec> = plans.iter().map(|p| p.spec.clone()).collect();
    let mut writer = SeriesWriter::create(out_path, schema)?;

    // Base checkpoint: all zeros, emitted in chunks.
    {
        let mut step = writer.step_writer(0)?;
        let zeros = vec![0.0; DOT_BLOCK];
        for plan in &plans {
            let mut sink = step.tensor_sink(&plan.spec.name)?;
            let mut remaining = plan.spec.element_count();
            while remaining > 0 {
                let len = remaining.min(DOT_BLOCK);
                sink.push(&zeros[..len])?;
                remaining -= len;
            }
            step.commit(sink.finish()?);
        }
        step.finish()?;
        writer.register_step(0);
    }

    let mut truth: BTreeMap<String, TensorTruth> = plans
        .iter()
        .map(|p| {
            let d = p.spec.element_count();
            let dump = d <= DIRECTION_DUMP_LIMIT;
            (
                p.spec.name.clone(),
                TensorTruth {
                    direction: if dump { p.direction.materialize(d) } else { Vec::new() },
                    slope: p.slope,
                    intercept: p.intercept,
                    steps: cfg.t_values.clone(),
                    coefficients: Vec::new(),
                    noise_norms: Vec::new(),
                    extra_directions: if dump {
                        p.extra_directions.iter().map(|e| e.materialize(d)).collect()
                    } else {
                        Vec::new()
                    },
                    extra_coefficients: Vec::new(),
                },
            )
        })
        .collect();

    for (ti, &t) in cfg.t_values.iter().enumerate() {
        let mut step = writer.step_writer(t)?;
        for (plan, extras) in plans.iter_mut().zip(&extra_coeffs) {
            let (coefficient, noise_norm) =
                emit_planted_tensor(&mut step, plan, cfg.noise, c_at(plan, t), extras, ti)?;
            let entry = truth.get_mut(&plan.spec.name).unwrap();
            entry.coefficients.push(coefficient);
            entry.noise_norms.push(noise_norm);
        }
        step.finish()?;
        writer.register_step(t);
    }

    for (plan, extras) in plans.iter().zip(&extra_coeffs) {
        truth.get_mut(&plan.spec.name).unwrap().extra_coefficients = extras.clone();
    }

    let series = writer.finish(0)?;
    let truth = GroundTruth { tensors: truth };
    let file = File::create(out_path.join("ground_truth.json"))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &truth)?;
    w.flush()?;
    Ok((series, truth))
}

fn c_at(plan: &TensorPlan, t: u64) -> f64 {
    plan.slope * t as f64 + plan.intercept
}

/// Write one planted tensor for one step, chunk by chunk. Returns the
/// realized coefficient along the planted direction and the noise norm.
///
/// For i.i.d. noise the gaussian stream is consumed twice: a first pass
/// accumulates ⟨g, v⟩ and ‖g‖² from a saved RNG state, a second pass
/// replays the stream and emits `c·v + factor·(g − along·v)` (orthogonal)
/// or `c·v + factor·g` (full) without materializing g.
fn emit_planted_tensor(
    step: &mut crate::store::StepWriter,
    plan: &mut TensorPlan,
    noise: NoiseKind,
    c: f64,
    extras: &[Vec<f64>],
    step_index: usize,
) -> Result<(f64, f64)> {
    let d = plan.spec.element_count();
    let mut vbuf = vec![0.0; DOT_BLOCK];
    let mut out = vec![0.0; DOT_BLOCK];

    // Plan the step's noise.
    struct IidNoise {
        replay: SplitMix64,
        along: f64,
        factor: f64,
        orthogonal: bool,
    }
    let mut iid: Option<IidNoise> = None;
    let mut coefficient = c;
    let mut noise_norm = 0.0;

    match noise {
        NoiseKind::None | NoiseKind::ExtraComponents { .. } => {}
        NoiseKind::OrthogonalIid | NoiseKind::FullIid => {
            let orthogonal = noise == NoiseKind::OrthogonalIid;
            let replay = plan.noise_rng.clone();
            let mut vcur = plan.direction.cursor();
            let mut along_acc = Pairwise::new();
            let mut sq_acc = Pairwise::new();
            let mut offset = 0;
            while offset < d {
                let len = (d - offset).min(DOT_BLOCK);
                vcur.fill(offset, &mut vbuf[..len]);
                let mut along = 0.0;
                let mut sq = 0.0;
                for v in &vbuf[..len] {
                    let g = plan.noise_rng.next_gaussian();
                    along += g * v;
                    sq += g * g;
                }
                along_acc.push(along);
                sq_acc.push(sq);
                offset += len;
            }
            let along = along_acc.finish();
            let gsq = sq_acc.finish();
            let target = plan.noise_scale * c.abs();
            let eff_sq = if orthogonal { gsq - along * along } else { gsq };
            if target > 0.0 && eff_sq > 0.0 {
                let factor = target / eff_sq.sqrt();
                noise_norm = target;
                if !orthogonal {
                    coefficient = c + factor * along;
                }
                iid = Some(IidNoise { replay, along, factor, orthogonal });
            }
        }
    }

    if let NoiseKind::ExtraComponents { .. } = noise {
        let sq: f64 = extras.iter().map(|walk| walk[step_index] * walk[step_index]).sum();
        noise_norm = sq.sqrt();
    }

    // Emission pass.
    let mut sink = step.tensor_sink(&plan.spec.name)?;
    let mut vcur = plan.direction.cursor();
    let mut extra_curs: Vec<DirectionCursor<'_>> =
        plan.extra_directions.iter().map(|e| e.cursor()).collect();
    let mut wbuf = vec![0.0; DOT_BLOCK];
    let mut offset = 0;
    while offset < d {
        let len = (d - offset).min(DOT_BLOCK);
        vcur.fill(offset, &mut vbuf[..len]);
        for (o, v) in out[..len].iter_mut().zip(&vbuf[..len]) {
            *o = c * v;
        }
        if let Some(noise) = iid.as_mut() {
            for (o, v) in out[..len].iter_mut().zip(&vbuf[..len]) {
                let g = noise.replay.next_gaussian();
                let centered = if noise.orthogonal { g - noise.along * v } else { g };
                *o += noise.factor * centered;
            }
        }
        for (cur, walk) in extra_curs.iter_mut().zip(extras) {
            let e = walk[step_index];
            cur.fill(offset, &mut wbuf[..len]);
            for (o, w) in out[..len].iter_mut().zip(&wbuf[..len]) {
                *o += e * w;
            }
        }
        sink.push(&out[..len])?;
        offset += len;
    }
    step.commit(sink.finish()?);
    Ok((coefficient, noise_norm))
}

fn validate_config(cfg: &PlantConfig) -> Result<()> {
    if cfg.tensors.is_empty() {
        return Err(Error::InvalidConfig("no tensors".into()));
    }
    if cfg.t_values.is_empty() {
        return Err(Error::InvalidConfig("no steps".into()));
    }
    let mut prev = 0u64;
    for &t in &cfg.t_values {
        if t <= prev {
            return Err(Error::InvalidConfig(format!(
                "t_values must be strictly increasing and positive, saw {prev} then {t}"
            )));
        }
        prev = t;
    }
    if cfg.noise_scale < 0.0 || cfg.tensors.iter().any(|t| t.noise_scale.unwrap_or(0.0) < 0.0) {
        return Err(Error::InvalidConfig("noise_scale must be non-negative".into()));
    }
    Ok(())
}

/// Full SVD of a small dense matrix by one-sided Jacobi: the columns of Mᵀ
/// are orthogonalized by plane rotations, which never forms MᵀM or M Mᵀ
/// and is therefore independent of the Gram-matrix main path.
#[derive(Debug, Clone)]
pub struct SvdTriples {
    pub singular_values: Vec<f64>,
    /// `left[k]` has the row dimension of M.
    pub left: Vec<Vec<f64>>,
    /// `right[k]` has the column dimension of M; zero when σ_k = 0.
    pub right: Vec<Vec<f64>>,
}

pub fn jacobi_svd_oracle(m: &[Vec<f64>]) -> Result<SvdTriples> {
    let t = m.len();
    if t == 0 {
        return Err(Error::SizeExceeded("matrix has no rows".into()));
    }
    let d = m[0].len();
    assert!(m.iter().all(|r| r.len() == d), "ragged matrix");
    if t > 64 || d > 4096 {
        return Err(Error::SizeExceeded(format!("{t}x{d} exceeds the 64x4096 oracle limit")));
    }

    // Columns of B = Mᵀ; column j is row j of M.
    let mut cols: Vec<Vec<f64>> = m.to_vec();
    // Accumulated rotation J (T×T), stored as columns.
    let mut j_cols: Vec<Vec<f64>> = (0..t)
        .map(|k| (0..t).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
        .collect();

    const EPS: f64 = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..t {
            for q in p + 1..t {
                let app: f64 = cols[p].iter().map(|v| v * v).sum();
                let aqq: f64 = cols[q].iter().map(|v| v * v).sum();
                let apq: f64 = cols[p].iter().zip(&cols[q]).map(|(a, b)| a * b).sum();
                if apq.abs() <= EPS * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let tan = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + tan * tan).sqrt();
                let s = c * tan;
                for i in 0..d {
                    let vp = cols[p][i];
                    let vq = cols[q][i];
                    cols[p][i] = c * vp - s * vq;
                    cols[q][i] = s * vp + c * vq;
                }
                for i in 0..t {
                    let jp = j_cols[p][i];
                    let jq = j_cols[q][i];
                    j_cols[p][i] = c * jp - s * jq;
                    j_cols[q][i] = s * jp + c * jq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..t).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut singular_values = Vec::with_capacity(t);
    let mut left = Vec::with_capacity(t);
    let mut right = Vec::with_capacity(t);
    for &k in &order {
        let sigma = norms[k];
        singular_values.push(sigma);
        left.push(j_cols[k].clone());
        if sigma > 0.0 {
            right.push(cols[k].iter().map(|v| v / sigma).collect());
        } else {
            right.push(vec![0.0; d]);
        }
    }
    Ok(SvdTriples { singular_values, left, right })
}

/// Rank-1 R² of a delta matrix computed entirely on the oracle path:
/// one-sided Jacobi for v₁, direct projections for the coefficients, and a
/// Cramer-rule normal-equations line fit. Used to predict what the main
/// pipeline must report.
pub fn oracle_rank1_r_squared(rows: &[Vec<f64>], steps: &[u64]) -> Result<f64> {
    let svd = jacobi_svd_oracle(rows)?;
    let v1 = &svd.right[0];
    let cs: Vec<f64> = rows.iter().map(|r| r.iter().zip(v1).map(|(a, b)| a * b).sum()).collect();
    let ts: Vec<f64> = steps.iter().map(|&t| t as f64).collect();
    let n = ts.len() as f64;
    let st: f64 = ts.iter().sum();
    let stt: f64 = ts.iter().map(|t| t * t).sum();
    let sc: f64 = cs.iter().sum();
    let stc: f64 = ts.iter().zip(&cs).map(|(t, c)| t * c).sum();
    let det = n * stt - st * st;
    if det == 0.0 {
        return Err(Error::DegenerateAbscissa);
    }
    let a = (n * stc - st * sc) / det;
    let b = (stt * sc - st * stc) / det;
    let c_mean = sc / n;
    let ss_res: f64 = ts.iter().zip(&cs).map(|(t, c)| (c - (a * t + b)).powi(2)).sum();
    let ss_tot: f64 = cs.iter().map(|c| (c - c_mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(if ss_res <= 1e-24 { 1.0 } else { 0.0 });
    }
    Ok((1.0 - ss_res / ss_tot).clamp(0.0, 1.0))
}
