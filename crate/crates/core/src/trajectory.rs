//! Per-tensor delta trajectories: the T×d matrix whose rows are
//! `flatten(theta_t - theta_0)` over the observed steps of a window.
//!
//! Small tensors are materialized; large ones stay on disk and are walked
//! in fixed [`DOT_BLOCK`]-element column blocks, so downstream consumers
//! (Gram accumulation, projections, per-element fits) never hold more than
//! one block per row. Both storage modes expose the same block pass and
//! produce bit-identical numbers because every reduction shares the same
//! block partition and pairwise combination order.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::{Pairwise, DOT_BLOCK};
use crate::store::{BlobReader, CheckpointSeries};

/// Materialize the full delta matrix only when the tensor has at most this
/// many elements; larger tensors are streamed from disk on every pass.
pub const DENSE_THRESHOLD: usize = 1 << 24;

#[derive(Clone)]
enum RowStore {
    Dense(Arc<Vec<Vec<f64>>>),
    Streamed { series: CheckpointSeries },
}

/// Delta trajectory of one tensor over an observation window.
#[derive(Clone)]
pub struct TrajectoryMatrix {
    tensor_name: String,
    steps: Vec<u64>,
    d: usize,
    store: RowStore,
}

/// Build the trajectory of `name` over all observed steps `<= upto_step`,
/// using the default materialization threshold.
pub fn build_trajectory(
    series: &CheckpointSeries,
    name: &str,
    upto_step: u64,
) -> Result<TrajectoryMatrix> {
    build_trajectory_with(series, name, upto_step, DENSE_THRESHOLD)
}

/// As [`build_trajectory`] with an explicit threshold on the element count
/// below which rows are materialized in memory.
pub fn build_trajectory_with(
    series: &CheckpointSeries,
    name: &str,
    upto_step: u64,
    dense_threshold: usize,
) -> Result<TrajectoryMatrix> {
    let spec = series.tensor_spec(name)?.clone();
    let steps = series.observed_upto(upto_step);
    if steps.is_empty() {
        return Err(Error::EmptyWindow(upto_step));
    }
    let d = spec.element_count();
    let store = if d <= dense_threshold {
        let base = crate::store::read_tensor(series, series.base_step(), name)?;
        let mut rows = Vec::with_capacity(steps.len());
        for &step in &steps {
            let mut row = crate::store::read_tensor(series, step, name)?;
            for (r, b) in row.iter_mut().zip(&base) {
                *r -= b;
            }
            rows.push(row);
        }
        RowStore::Dense(Arc::new(rows))
    } else {
        RowStore::Streamed { series: series.clone() }
    };
    Ok(TrajectoryMatrix { tensor_name: name.to_string(), steps, d, store })
}

impl TrajectoryMatrix {
    /// Build directly from in-memory delta rows. Mostly for tests and the
    /// synthetic oracles.
    pub fn from_rows(tensor_name: impl Into<String>, steps: Vec<u64>, rows: Vec<Vec<f64>>) -> Self {
        assert_eq!(steps.len(), rows.len());
        assert!(!rows.is_empty());
        let d = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == d));
        Self {
            tensor_name: tensor_name.into(),
            steps,
            d,
            store: RowStore::Dense(Arc::new(rows)),
        }
    }

    pub fn tensor_name(&self) -> &str {
        &self.tensor_name
    }

    /// Observed step values, strictly increasing.
    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    /// Number of rows (T_cut).
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Flattened element count per row.
    pub fn dim(&self) -> usize {
        self.d
    }

    /// Restrict to the first `rows` rows. Cheap; shares storage.
    pub fn prefix(&self, rows: usize) -> TrajectoryMatrix {
        assert!(rows >= 1 && rows <= self.len());
        TrajectoryMatrix {
            tensor_name: self.tensor_name.clone(),
            steps: self.steps[..rows].to_vec(),
            d: self.d,
            store: self.store.clone(),
        }
    }

    /// Walk the matrix in column blocks of [`DOT_BLOCK`] elements. The
    /// callback receives the element offset and one block-sized slice per
    /// row, in step order.
    pub fn for_each_block<F>(&self, mut f: F) -> Result<()>
    where
        F: FnMut(usize, &[&[f64]]),
    {
        match &self.store {
            RowStore::Dense(rows) => {
                let mut offset = 0;
                while offset < self.d {
                    let end = (offset + DOT_BLOCK).min(self.d);
                    let views: Vec<&[f64]> =
                        self.steps.iter().enumerate().map(|(i, _)| &rows[i][offset..end]).collect();
                    f(offset, &views);
                    offset = end;
                }
                Ok(())
            }
            RowStore::Streamed { series } => {
                let base_step = series.base_step();
                let mut base_reader = BlobReader::for_tensor(series, base_step, &self.tensor_name)?;
                let mut step_readers = self
                    .steps
                    .iter()
                    .map(|&s| BlobReader::for_tensor(series, s, &self.tensor_name))
                    .collect::<Result<Vec<_>>>()?;
                let mut base_buf = Vec::with_capacity(DOT_BLOCK);
                let mut row_bufs: Vec<Vec<f64>> =
                    (0..self.steps.len()).map(|_| Vec::with_capacity(DOT_BLOCK)).collect();
                let mut offset = 0usize;
                while base_reader.next_block(&mut base_buf)?.is_some() {
                    for (reader, buf) in step_readers.iter_mut().zip(&mut row_bufs) {
                        reader.next_block(buf)?;
                        debug_assert_eq!(buf.len(), base_buf.len());
                        for (v, b) in buf.iter_mut().zip(&base_buf) {
                            *v -= b;
                        }
                    }
                    let views: Vec<&[f64]> = row_bufs.iter().map(|b| b.as_slice()).collect();
                    f(offset, &views);
                    offset += base_buf.len();
                }
                // Drain step readers so their checksums are verified too.
                for reader in &mut step_readers {
                    reader.next_block(&mut base_buf)?;
                }
                Ok(())
            }
        }
    }

    /// Materialize one delta row.
    pub fn row(&self, index: usize) -> Result<Vec<f64>> {
        if index >= self.len() {
            return Err(Error::BadStepIndex { index, rows: self.len() });
        }
        match &self.store {
            RowStore::Dense(rows) => Ok(rows[index].clone()),
            RowStore::Streamed { .. } => {
                let mut out = Vec::with_capacity(self.d);
                self.for_each_block(|_, blocks| out.extend_from_slice(blocks[index]))?;
                Ok(out)
            }
        }
    }

    /// True when every row is identically zero. For streamed storage this
    /// is a full pass; the spectral layer instead checks the Gram trace it
    /// computes anyway.
    pub fn is_zero(&self) -> Result<bool> {
        match &self.store {
            RowStore::Dense(rows) => {
                Ok(rows[..self.len()].iter().all(|r| r.iter().all(|&v| v == 0.0)))
            }
            RowStore::Streamed { .. } => {
                let mut zero = true;
                self.for_each_block(|_, blocks| {
                    if zero && blocks.iter().any(|b| b.iter().any(|&v| v != 0.0)) {
                        zero = false;
                    }
                })?;
                Ok(zero)
            }
        }
    }
}

/// Euclidean norm of each delta row, in step order.
pub fn delta_norms(traj: &TrajectoryMatrix) -> Result<Vec<f64>> {
    let mut accs: Vec<Pairwise> = (0..traj.len()).map(|_| Pairwise::new()).collect();
    traj.for_each_block(|_, blocks| {
        for (acc, block) in accs.iter_mut().zip(blocks) {
            let mut s = 0.0;
            for &v in *block {
                s += v * v;
            }
            acc.push(s);
        }
    })?;
    Ok(accs.iter().map(|a| a.finish().sqrt()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{Dtype, SeriesWriter, TensorSpec};
    use std::collections::BTreeMap;

    fn series_with_rows(
        dir: &std::path::Path,
        base: Vec<f64>,
        steps: &[(u64, Vec<f64>)],
    ) -> CheckpointSeries {
        let schema = vec![TensorSpec::new("w", vec![base.len()], Dtype::F32)];
        let mut writer = SeriesWriter::create(dir, schema).unwrap();
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), base);
        writer.write_step(0, &map).unwrap();
        for (step, vals) in steps {
            map.insert("w".to_string(), vals.clone());
            writer.write_step(*step, &map).unwrap();
        }
        writer.finish(0).unwrap()
    }

    #[test]
    fn rows_are_direct_differences() {
        let dir = tempfile::tempdir().unwrap();
        let series = series_with_rows(
            dir.path(),
            vec![1.0, 1.0],
            &[(1, vec![2.0, 3.0]), (2, vec![3.0, 5.0])],
        );
        let traj = build_trajectory(&series, "w", 2).unwrap();
        assert_eq!(traj.steps(), &[1, 2]);
        assert_eq!(traj.row(0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(traj.row(1).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn zero_delta_rows() {
        let dir = tempfile::tempdir().unwrap();
        let series =
            series_with_rows(dir.path(), vec![0.5, -2.0], &[(1, vec![0.5, -2.0])]);
        let traj = build_trajectory(&series, "w", 1).unwrap();
        assert_eq!(traj.row(0).unwrap(), vec![0.0, 0.0]);
        assert!(traj.is_zero().unwrap());
    }

    #[test]
    fn window_filters_steps() {
        let dir = tempfile::tempdir().unwrap();
        let series = series_with_rows(
            dir.path(),
            vec![0.0],
            &[(5, vec![1.0]), (10, vec![2.0]), (15, vec![3.0])],
        );
        let traj = build_trajectory(&series, "w", 12).unwrap();
        assert_eq!(traj.steps(), &[5, 10]);
        assert_eq!(traj.len(), 2);
        assert!(matches!(
            build_trajectory(&series, "w", 2),
            Err(Error::EmptyWindow(2))
        ));
        assert!(matches!(
            build_trajectory(&series, "nope", 12),
            Err(Error::UnknownTensor(_))
        ));
    }

    #[test]
    fn delta_norms_triangle() {
        let traj = TrajectoryMatrix::from_rows("t", vec![1], vec![vec![3.0, 4.0]]);
        assert_eq!(delta_norms(&traj).unwrap(), vec![5.0]);
        let zero = TrajectoryMatrix::from_rows("t", vec![1], vec![vec![0.0, 0.0]]);
        assert_eq!(delta_norms(&zero).unwrap(), vec![0.0]);
    }

    #[test]
    fn delta_norms_match_elementwise_oracle() {
        let mut rng = crate::numeric::SplitMix64::new(99);
        let rows: Vec<Vec<f64>> =
            (0..3).map(|_| (0..8).map(|_| rng.next_symmetric()).collect()).collect();
        let expected: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let traj = TrajectoryMatrix::from_rows("t", vec![1, 2, 3], rows);
        for (got, want) in delta_norms(&traj).unwrap().iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-12 * want.max(1.0));
        }
    }

    #[test]
    fn streamed_pass_matches_dense() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::numeric::SplitMix64::new(3);
        let d = 2 * DOT_BLOCK + 100;
        let base: Vec<f64> = (0..d).map(|_| (rng.next_symmetric() as f32) as f64).collect();
        let steps: Vec<(u64, Vec<f64>)> = (1..4)
            .map(|s| {
                (
                    s,
                    base.iter()
                        .map(|b| ((b + rng.next_symmetric()) as f32) as f64)
                        .collect(),
                )
            })
            .collect();
        let series = series_with_rows(dir.path(), base, &steps);
        let dense = build_trajectory_with(&series, "w", 10, usize::MAX).unwrap();
        let streamed = build_trajectory_with(&series, "w", 10, 0).unwrap();
        for i in 0..dense.len() {
            let a = dense.row(i).unwrap();
            let b = streamed.row(i).unwrap();
            assert_eq!(a, b, "row {i} differs between dense and streamed");
        }
        let na = delta_norms(&dense).unwrap();
        let nb = delta_norms(&streamed).unwrap();
        for (a, b) in na.iter().zip(&nb) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rows_restore_the_step_tensor() {
        // Adding a row back onto the base reproduces the stored step
        // tensor (both sides already narrowed once by the store).
        let dir = tempfile::tempdir().unwrap();
        let base = vec![0.1f32 as f64, -2.5, 0.75, 1.0 / 3.0f32 as f64];
        let stepped: Vec<f64> = base.iter().map(|b| ((b + 0.7) as f32) as f64).collect();
        let series = series_with_rows(dir.path(), base, &[(1, stepped.clone())]);
        let traj = build_trajectory(&series, "w", 1).unwrap();
        let base_read = crate::store::read_tensor(&series, 0, "w").unwrap();
        let row = traj.row(0).unwrap();
        for ((r, b), want) in row.iter().zip(&base_read).zip(&stepped) {
            let restored = (((r + b) as f32) as f64 - ((*want as f32) as f64)).abs();
            assert!(restored == 0.0, "row + base missed the step tensor by {restored}");
        }
    }

    #[test]
    fn prefix_consistency() {
        let dir = tempfile::tempdir().unwrap();
        let series = series_with_rows(
            dir.path(),
            vec![0.0, 0.0],
            &[(1, vec![1.0, 0.5]), (2, vec![2.0, 1.0]), (3, vec![3.0, 1.5])],
        );
        let big = build_trajectory(&series, "w", 3).unwrap();
        let small = build_trajectory(&series, "w", 2).unwrap();
        assert_eq!(big.prefix(2).steps(), small.steps());
        for i in 0..2 {
            assert_eq!(big.prefix(2).row(i).unwrap(), small.row(i).unwrap());
        }
    }
}
