//! Analysis instruments: per-tensor linearity reports, explained-variance
//! spectra, coefficient dumps for external plotting, and weight-space
//! alignment between a predicted and an actual series.
//!
//! Reports are sorted by tensor name and floats are formatted with 17
//! significant digits, so repeated runs emit byte-identical files.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::extrapolate::fit_rank1_from_gram;
use crate::numeric::Pairwise;
use crate::spectral::{gram_matrix, truncated_svd_lenient, SpectralDecomposition};
use crate::store::{BlobReader, CheckpointSeries};
use crate::trajectory::{build_trajectory, TrajectoryMatrix};

pub const DEFAULT_R2_THRESHOLD: f64 = 0.98;

/// Fixed 17-significant-digit float formatting for reports; round-trips
/// f64 exactly and keeps output byte-stable.
pub fn format_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.16e}")
    }
}

/// Rank-1 linearity statistics for one tensor.
#[derive(Debug, Clone, Serialize)]
pub struct TensorDiagnostics {
    pub tensor_name: String,
    pub r_squared: f64,
    pub slope: f64,
    pub intercept: f64,
    pub sigma_top_k: Vec<f64>,
    pub explained_variance: Vec<f64>,
    /// Per-component coefficient series, `[component][step]`.
    pub coefficient_series: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LinearityReport {
    pub records: Vec<TensorDiagnostics>,
    /// Zero-delta tensors, excluded from records.
    pub skipped: Vec<String>,
    pub threshold: f64,
    /// Fraction of reported tensors with R² above the threshold.
    pub fraction_above: f64,
}

/// Fit every tensor's rank-1 line over the window and report R², slope,
/// intercept and σ₁. Zero-delta tensors are skipped and counted.
pub fn linearity_report(
    series: &CheckpointSeries,
    t_cut: u64,
    threshold: f64,
) -> Result<LinearityReport> {
    if series.observed_upto(t_cut).len() < 2 {
        return Err(Error::EmptyWindow(t_cut));
    }
    let mut names: Vec<String> = series.schema().iter().map(|t| t.name.clone()).collect();
    names.sort();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for name in names {
        let traj = build_trajectory(series, &name, t_cut)?;
        let gram = gram_matrix(&traj)?;
        match fit_rank1_from_gram(&traj, &gram) {
            Ok(model) => records.push(TensorDiagnostics {
                tensor_name: name,
                r_squared: model.fit.r_squared,
                slope: model.fit.a,
                intercept: model.fit.b,
                sigma_top_k: vec![model.sigma1],
                explained_variance: vec![1.0],
                coefficient_series: vec![model.coefficients],
            }),
            Err(Error::ZeroTrajectory(_)) => skipped.push(name),
            Err(e) => return Err(e),
        }
    }
    let above = records.iter().filter(|r| r.r_squared > threshold).count();
    let fraction_above =
        if records.is_empty() { 0.0 } else { above as f64 / records.len() as f64 };
    Ok(LinearityReport { records, skipped, threshold, fraction_above })
}

/// σ_k² / Σ σ_j² over the retained components.
pub fn explained_variance(decomp: &SpectralDecomposition) -> Vec<f64> {
    let total: f64 = decomp.singular_values.iter().map(|s| s * s).sum();
    decomp.singular_values.iter().map(|s| s * s / total).collect()
}

/// Rank-r coefficient trajectories of one tensor, with the explained
/// variance of each component, for external plotting.
#[derive(Debug, Clone, Serialize)]
pub struct CoefficientDump {
    pub tensor_name: String,
    pub steps: Vec<u64>,
    pub sigma: Vec<f64>,
    pub explained_variance: Vec<f64>,
    /// `coefficients[t][k]`.
    pub coefficients: Vec<Vec<f64>>,
}

pub fn coefficient_dump(traj: &TrajectoryMatrix, r: usize) -> Result<CoefficientDump> {
    let gram = gram_matrix(traj)?;
    // Lenient: asking for more rank than the data carries yields exact
    // zero trailing components rather than an error.
    let dec = truncated_svd_lenient(traj, &gram, r)?;
    let sigma = dec.singular_values.clone();
    let fractions = explained_variance(&dec);
    let mut coefficients = dec.coefficients;
    // Same sign convention as the fitted models: per component, slope of
    // the coefficient series non-negative, ties broken by the last value.
    let ts: Vec<f64> = traj.steps().iter().map(|&t| t as f64).collect();
    for k in 0..r {
        let series: Vec<f64> = coefficients.iter().map(|row| row[k]).collect();
        let flip = match crate::spectral::linear_fit(&ts, &series) {
            Ok(fit) => {
                fit.a < 0.0 || (fit.a == 0.0 && series.last().is_some_and(|&c| c < 0.0))
            }
            Err(_) => false,
        };
        if flip {
            for row in coefficients.iter_mut() {
                row[k] = -row[k];
            }
        }
    }
    Ok(CoefficientDump {
        tensor_name: traj.tensor_name().to_string(),
        steps: traj.steps().to_vec(),
        sigma,
        explained_variance: fractions,
        coefficients,
    })
}

/// Per-tensor alignment of one predicted step against the actual one.
#[derive(Debug, Clone, Serialize)]
pub struct TensorAlignment {
    pub tensor_name: String,
    /// `None` when either delta has zero norm (undefined direction).
    pub cosine: Option<f64>,
    /// `None` when the actual delta has zero norm.
    pub norm_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignmentRecord {
    pub step: u64,
    /// Unweighted mean over tensors with a defined cosine.
    pub mean_cosine: f64,
    /// Unweighted mean over tensors with a defined ratio.
    pub mean_norm_ratio: f64,
    pub per_tensor: Vec<TensorAlignment>,
}

/// Compare predicted deltas against actual deltas at the given steps.
/// Deltas are taken against the base checkpoint of the actual series;
/// cosine is ⟨Δ̂, Δ⟩ / (‖Δ̂‖·‖Δ‖) and the ratio is ‖Δ̂‖ / ‖Δ‖.
pub fn alignment_report(
    predicted: &CheckpointSeries,
    actual: &CheckpointSeries,
    base_step: u64,
    steps: &[u64],
) -> Result<Vec<AlignmentRecord>> {
    check_same_schema(predicted, actual)?;
    for &s in steps {
        if !predicted.has_step(s) || !actual.has_step(s) {
            return Err(Error::MissingStep(s));
        }
    }
    if !actual.has_step(base_step) {
        return Err(Error::MissingStep(base_step));
    }

    let mut names: Vec<String> = actual.schema().iter().map(|t| t.name.clone()).collect();
    names.sort();

    let mut records = Vec::with_capacity(steps.len());
    for &step in steps {
        let mut per_tensor = Vec::with_capacity(names.len());
        for name in &names {
            let (dot, pred_sq, act_sq) = delta_alignment(predicted, actual, base_step, step, name)?;
            let pred_norm = pred_sq.sqrt();
            let act_norm = act_sq.sqrt();
            let cosine = if pred_norm > 0.0 && act_norm > 0.0 {
                Some(dot / (pred_sq * act_sq).sqrt())
            } else {
                None
            };
            let norm_ratio = if act_norm > 0.0 { Some(pred_norm / act_norm) } else { None };
            per_tensor.push(TensorAlignment { tensor_name: name.clone(), cosine, norm_ratio });
        }
        let mean = |vals: Vec<f64>| {
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let mean_cosine = mean(per_tensor.iter().filter_map(|t| t.cosine).collect());
        let mean_norm_ratio = mean(per_tensor.iter().filter_map(|t| t.norm_ratio).collect());
        records.push(AlignmentRecord { step, mean_cosine, mean_norm_ratio, per_tensor });
    }
    Ok(records)
}

fn check_same_schema(a: &CheckpointSeries, b: &CheckpointSeries) -> Result<()> {
    for spec in a.schema() {
        match b.schema().iter().find(|t| t.name == spec.name) {
            Some(t) if t.shape == spec.shape && t.dtype == spec.dtype => {}
            _ => {
                return Err(Error::SchemaMismatch {
                    tensor: spec.name.clone(),
                    step: b.base_step(),
                    detail: "series schemas differ".into(),
                })
            }
        }
    }
    if a.schema().len() != b.schema().len() {
        return Err(Error::SchemaMismatch {
            tensor: String::new(),
            step: b.base_step(),
            detail: "series schemas differ in tensor count".into(),
        });
    }
    Ok(())
}

/// Stream ⟨Δ̂, Δ⟩, ‖Δ̂‖², ‖Δ‖² for one tensor at one step.
fn delta_alignment(
    predicted: &CheckpointSeries,
    actual: &CheckpointSeries,
    base_step: u64,
    step: u64,
    name: &str,
) -> Result<(f64, f64, f64)> {
    let mut pred = BlobReader::for_tensor(predicted, step, name)?;
    let mut act = BlobReader::for_tensor(actual, step, name)?;
    let mut base = BlobReader::for_tensor(actual, base_step, name)?;
    let mut bp = Vec::new();
    let mut ba = Vec::new();
    let mut bb = Vec::new();
    let mut dot = Pairwise::new();
    let mut pred_sq = Pairwise::new();
    let mut act_sq = Pairwise::new();
    while base.next_block(&mut bb)?.is_some() {
        pred.next_block(&mut bp)?;
        act.next_block(&mut ba)?;
        let mut d = 0.0;
        let mut p = 0.0;
        let mut a = 0.0;
        for ((&pv, &av), &bv) in bp.iter().zip(&ba).zip(&bb) {
            let dp = pv - bv;
            let da = av - bv;
            d += dp * da;
            p += dp * dp;
            a += da * da;
        }
        dot.push(d);
        pred_sq.push(p);
        act_sq.push(a);
    }
    pred.next_block(&mut bp)?;
    act.next_block(&mut ba)?;
    Ok((dot.finish(), pred_sq.finish(), act_sq.finish()))
}

// ---- CSV emission ----

/// `tensor,r2,slope,intercept,sigma1`, one row per reported tensor.
pub fn linearity_csv(report: &LinearityReport) -> String {
    let mut out = String::from("tensor,r2,slope,intercept,sigma1\n");
    for r in &report.records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.tensor_name,
            format_f64(r.r_squared),
            format_f64(r.slope),
            format_f64(r.intercept),
            format_f64(r.sigma_top_k[0]),
        ));
    }
    out
}

/// `tensor,step,cosine,norm_ratio`, one row per tensor per step.
pub fn alignment_csv(records: &[AlignmentRecord]) -> String {
    let mut out = String::from("tensor,step,cosine,norm_ratio\n");
    for rec in records {
        for t in &rec.per_tensor {
            out.push_str(&format!(
                "{},{},{},{}\n",
                t.tensor_name,
                rec.step,
                t.cosine.map_or_else(|| "nan".to_string(), format_f64),
                t.norm_ratio.map_or_else(|| "nan".to_string(), format_f64),
            ));
        }
    }
    out
}

/// `tensor,component,sigma,explained_variance`.
pub fn explained_variance_csv(dumps: &[CoefficientDump]) -> String {
    let mut out = String::from("tensor,component,sigma,explained_variance\n");
    for d in dumps {
        for k in 0..d.sigma.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                d.tensor_name,
                k + 1,
                format_f64(d.sigma[k]),
                format_f64(d.explained_variance[k]),
            ));
        }
    }
    out
}

/// `tensor,step,component,value`, row-major over steps then components.
pub fn coefficient_csv(dumps: &[CoefficientDump]) -> String {
    let mut out = String::from("tensor,step,component,value\n");
    for d in dumps {
        for (ti, &step) in d.steps.iter().enumerate() {
            for k in 0..d.sigma.len() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    d.tensor_name,
                    step,
                    k + 1,
                    format_f64(d.coefficients[ti][k]),
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{Dtype, SeriesWriter, TensorSpec};
    use crate::synth::{plant_series, NoiseKind, PlantConfig, PlantTensor};
    use std::collections::BTreeMap;

    fn exact_plant(dir: &std::path::Path, names: &[&str]) -> CheckpointSeries {
        let cfg = PlantConfig {
            rng_seed: 5,
            planted_direction_seed: 6,
            t_values: vec![1, 2, 3, 4],
            noise: NoiseKind::None,
            noise_scale: 0.0,
            tensors: names
                .iter()
                .map(|n| PlantTensor {
                    name: n.to_string(),
                    shape: vec![4, 4],
                    slope: 0.5,
                    intercept: 0.25,
                    dtype: Dtype::F32,
                    noise_scale: None,
                })
                .collect(),
        };
        plant_series(&cfg, dir).unwrap().0
    }

    #[test]
    fn linearity_on_exact_plant() {
        let dir = tempfile::tempdir().unwrap();
        let series = exact_plant(dir.path(), &["a.w", "b.w"]);
        let report = linearity_report(&series, 4, DEFAULT_R2_THRESHOLD).unwrap();
        assert_eq!(report.records.len(), 2);
        for r in &report.records {
            assert_eq!(r.r_squared, 1.0);
        }
        assert_eq!(report.fraction_above, 1.0);
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn linearity_skips_zero_delta() {
        let dir = tempfile::tempdir().unwrap();
        let schema = vec![
            TensorSpec::new("live", vec![4], Dtype::F32),
            TensorSpec::new("frozen", vec![4], Dtype::F32),
        ];
        let mut writer = SeriesWriter::create(dir.path(), schema).unwrap();
        for step in [0u64, 1, 2] {
            let mut map = BTreeMap::new();
            map.insert("live".to_string(), vec![step as f64; 4]);
            map.insert("frozen".to_string(), vec![1.0; 4]);
            writer.write_step(step, &map).unwrap();
        }
        let series = writer.finish(0).unwrap();
        let report = linearity_report(&series, 2, DEFAULT_R2_THRESHOLD).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.records[0].tensor_name, "live");
        assert_eq!(report.skipped, vec!["frozen".to_string()]);
    }

    #[test]
    fn linearity_requires_two_steps() {
        let dir = tempfile::tempdir().unwrap();
        let series = exact_plant(dir.path(), &["a.w"]);
        assert!(matches!(
            linearity_report(&series, 1, DEFAULT_R2_THRESHOLD),
            Err(Error::EmptyWindow(1))
        ));
    }

    #[test]
    fn explained_variance_fractions() {
        let dec = SpectralDecomposition {
            singular_values: vec![2.0, 1.0],
            left_vectors: vec![vec![1.0], vec![0.0]],
            right_vectors: vec![vec![1.0], vec![0.0]],
            coefficients: vec![vec![2.0, 0.0]],
        };
        let ev = explained_variance(&dec);
        assert!((ev[0] - 0.8).abs() < 1e-15);
        assert!((ev[1] - 0.2).abs() < 1e-15);

        let single = SpectralDecomposition {
            singular_values: vec![3.0],
            left_vectors: vec![vec![1.0]],
            right_vectors: vec![vec![1.0]],
            coefficients: vec![vec![3.0]],
        };
        assert_eq!(explained_variance(&single), vec![1.0]);
    }

    #[test]
    fn coefficient_dump_rank2_on_exact_line() {
        let dir = tempfile::tempdir().unwrap();
        let series = exact_plant(dir.path(), &["a.w"]);
        let traj = build_trajectory(&series, "a.w", 4).unwrap();
        // Exact rank-1 data: no energy beyond the first component.
        let dump = coefficient_dump(&traj, 2).unwrap();
        let sigma1 = dump.sigma[0];
        for row in &dump.coefficients {
            assert!(row[1].abs() <= 1e-9 * sigma1, "component 2 carries {:?}", row[1]);
        }
        let dump = coefficient_dump(&traj, 1).unwrap();
        let model = crate::extrapolate::fit_rank1(&traj).unwrap();
        // Shared sign convention: the dump matches the fitted model.
        for (row, c) in dump.coefficients.iter().zip(&model.coefficients) {
            assert!((row[0] - c).abs() < 1e-10);
        }
    }

    #[test]
    fn alignment_self_and_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let series = exact_plant(dir.path(), &["a.w"]);
        let recs = alignment_report(&series, &series, 0, &[2, 4]).unwrap();
        for rec in &recs {
            assert_eq!(rec.mean_cosine, 1.0);
            assert_eq!(rec.mean_norm_ratio, 1.0);
        }

        //

        let dir2 = tempfile::tempdir().unwrap();
        let schema = vec![TensorSpec::new("a.w", vec![4, 4], Dtype::F32)];
        let mut writer = SeriesWriter::create(dir2.path(), schema).unwrap();
        for step in [0u64, 2, 4] {
            let actual = crate::store::read_tensor(&series, step, "a.w").unwrap();
            let scaled: Vec<f64> = actual.iter().map(|v| 2.0 * v).collect();
            let mut map = BTreeMap::new();
            map.insert("a.w".to_string(), scaled);
            writer.write_step(step, &map).unwrap();
        }
        let doubled = writer.finish(0).unwrap();
        let recs = alignment_report(&doubled, &series, 0, &[2, 4]).unwrap();
        for rec in &recs {
            assert!((rec.mean_cosine - 1.0).abs() <= 1e-12);
            assert!((rec.mean_norm_ratio - 2.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn alignment_zero_prediction_sentinel() {
        let dir = tempfile::tempdir().unwrap();
        let series = exact_plant(dir.path(), &["a.w"]);
        // Predicted series that never moves off the base.
        let dir2 = tempfile::tempdir().unwrap();
        let schema = vec![TensorSpec::new("a.w", vec![4, 4], Dtype::F32)];
        let mut writer = SeriesWriter::create(dir2.path(), schema).unwrap();
        let base = crate::store::read_tensor(&series, 0, "a.w").unwrap();
        for step in [0u64, 2] {
            let mut map = BTreeMap::new();
            map.insert("a.w".to_string(), base.clone());
            writer.write_step(step, &map).unwrap();
        }
        let frozen = writer.finish(0).unwrap();
        let recs = alignment_report(&frozen, &series, 0, &[2]).unwrap();
        assert!(recs[0].per_tensor[0].cosine.is_none());
        assert_eq!(recs[0].per_tensor[0].norm_ratio, Some(0.0));
        assert_eq!(recs[0].mean_norm_ratio, 0.0);
    }

    #[test]
    fn alignment_rejects_schema_mismatch_and_missing_step() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = exact_plant(dir_a.path(), &["a.w"]);
        let b = exact_plant(dir_b.path(), &["b.w"]);
        assert!(matches!(
            alignment_report(&a, &b, 0, &[2]),
            Err(Error::SchemaMismatch { .. })
        ));
        let dir_c = tempfile::tempdir().unwrap();
        let c = exact_plant(dir_c.path(), &["a.w"]);
        assert!(matches!(alignment_report(&a, &c, 0, &[9]), Err(Error::MissingStep(9))));
    }

    #[test]
    fn csv_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let series = exact_plant(dir.path(), &["a.w"]);
        let report = linearity_report(&series, 4, 0.98).unwrap();
        let csv = linearity_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "tensor,r2,slope,intercept,sigma1");
        let row = lines.next().unwrap();
        assert!(row.starts_with("a.w,1.0000000000000000e0,"));
    }
}
