//! Numerical core: truncated SVD of trajectory matrices through the small
//! T×T Gram matrix, a cyclic Jacobi symmetric eigensolver, closed-form line
//! fits, polynomial least squares on a scaled Vandermonde basis, and
//! one-component PLS regression.
//!
//! The trajectory matrix is T×d with T ≪ d, so the SVD is computed as
//! G = M Mᵀ, G = Q Λ Qᵀ, σ_k = √λ_k, u_k = q_k, v_k = Mᵀ u_k / σ_k, with
//! the d-length products streamed over column blocks. Every reduction over
//! d uses the same blocked pairwise accumulation, which makes Gram entries
//! independent of the observation window and bit-stable across the dense
//! and streamed storage paths.

use crate::error::{Error, Result};
use crate::numeric::{pairwise_dot, pairwise_sum, solve_dense, Pairwise};
use crate::trajectory::TrajectoryMatrix;

const JACOBI_MAX_SWEEPS: usize = 30;
const JACOBI_OFF_TOL: f64 = 1e-14;
const SYMMETRY_TOL: f64 = 1e-10;
const DEGENERATE_SIGMA_RATIO: f64 = 1e-12;
// Eigenvalues below this multiple of λ_max are indistinguishable from zero
// through the Gram matrix (which squares the conditioning) and are clamped
// to exactly zero, like roundoff negatives.
const EIGENVALUE_NOISE_FLOOR: f64 = 16.0 * f64::EPSILON;

/// T×T matrix of pairwise row inner products, symmetric by construction
/// (upper triangle computed, then mirrored). Accumulation is blocked
/// pairwise in f64.
pub fn gram_matrix(traj: &TrajectoryMatrix) -> Result<Vec<Vec<f64>>> {
    let t = traj.len();
    let tri_len = t * (t + 1) / 2;
    // Pairwise stack over whole-triangle block partials: one level per
    // power of two of processed blocks, merged elementwise.
    let mut stack: Vec<(u32, Vec<f64>)> = Vec::new();
    traj.for_each_block(|_, rows| {
        let mut partial = vec![0.0; tri_len];
        let mut idx = 0;
        for i in 0..t {
            let ri = rows[i];
            for j in i..t {
                let rj = rows[j];
                let mut s = 0.0;
                for (a, b) in ri.iter().zip(rj) {
                    s += a * b;
                }
                partial[idx] = s;
                idx += 1;
            }
        }
        let mut level = 0u32;
        let mut acc = partial;
        while let Some((top_level, _)) = stack.last() {
            if *top_level != level {
                break;
            }
            let (_, top) = stack.pop().unwrap();
            for (a, b) in acc.iter_mut().zip(&top) {
                *a += b;
            }
            level += 1;
        }
        stack.push((level, acc));
    })?;

    let mut tri = vec![0.0; tri_len];
    for (_, partial) in stack.iter().rev() {
        for (a, b) in tri.iter_mut().zip(partial) {
            *a += b;
        }
    }

    let mut gram = vec![vec![0.0; t]; t];
    let mut idx = 0;
    for i in 0..t {
        for j in i..t {
            gram[i][j] = tri[idx];
            gram[j][i] = tri[idx];
            idx += 1;
        }
    }
    Ok(gram)
}

/// Extend the Gram matrix of `traj.prefix(T-1)` by the bordered row and
/// column for the final row of `traj`. Entries are bit-identical to a full
/// recompute because each Gram entry depends only on its two rows and the
/// fixed block partition.
pub fn extend_gram(traj: &TrajectoryMatrix, prefix_gram: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let t = traj.len();
    assert_eq!(prefix_gram.len(), t - 1, "prefix gram must cover all but the last row");
    let last = t - 1;
    let mut accs: Vec<Pairwise> = (0..t).map(|_| Pairwise::new()).collect();
    traj.for_each_block(|_, rows| {
        let rl = rows[last];
        for (j, acc) in accs.iter_mut().enumerate() {
            let mut s = 0.0;
            for (a, b) in rows[j].iter().zip(rl) {
                s += a * b;
            }
            acc.push(s);
        }
    })?;
    let border: Vec<f64> = accs.iter().map(|a| a.finish()).collect();

    let mut gram = vec![vec![0.0; t]; t];
    for i in 0..t - 1 {
        gram[i][..t - 1].copy_from_slice(&prefix_gram[i][..t - 1]);
    }
    for j in 0..t {
        gram[last][j] = border[j];
        gram[j][last] = border[j];
    }
    Ok(gram)
}

fn frobenius_sq(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in non-increasing order and the matching orthonormal
/// eigenvectors (`vectors[k]` is the k-th eigenvector). Sweeps stop when
/// the off-diagonal Frobenius norm falls below 1e-14 of the matrix norm,
/// capped at 30 sweeps.
pub fn sym_eigendecomp(g: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = g.len();
    assert!(g.iter().all(|row| row.len() == n), "matrix must be square");

    let mut a = vec![0.0; n * n];
    for (i, row) in g.iter().enumerate() {
        a[i * n..(i + 1) * n].copy_from_slice(row);
    }
    let norm = frobenius_sq(&a).sqrt();
    let mut asym = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = a[i * n + j] - a[j * n + i];
            asym += d * d;
        }
    }
    if asym.sqrt() > SYMMETRY_TOL * norm {
        return Err(Error::NotSymmetric);
    }

    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }

    if norm > 0.0 {
        for _sweep in 0..JACOBI_MAX_SWEEPS {
            let mut off = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    off += 2.0 * a[i * n + j] * a[i * n + j];
                }
            }
            if off.sqrt() <= JACOBI_OFF_TOL * norm {
                break;
            }
            for p in 0..n {
                for r in p + 1..n {
                    let apr = a[p * n + r];
                    if apr == 0.0 {
                        continue;
                    }
                    let app = a[p * n + p];
                    let arr = a[r * n + r];
                    let theta = (arr - app) / (2.0 * apr);
                    let t = if theta >= 0.0 {
                        1.0 / (theta + (theta * theta + 1.0).sqrt())
                    } else {
                        -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                    };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;

                    a[p * n + p] = app - t * apr;
                    a[r * n + r] = arr + t * apr;
                    a[p * n + r] = 0.0;
                    a[r * n + p] = 0.0;
                    for i in 0..n {
                        if i == p || i == r {
                            continue;
                        }
                        let aip = a[i * n + p];
                        let air = a[i * n + r];
                        a[i * n + p] = c * aip - s * air;
                        a[i * n + r] = s * aip + c * air;
                        a[p * n + i] = a[i * n + p];
                        a[r * n + i] = a[i * n + r];
                    }
                    for i in 0..n {
                        let qip = q[i * n + p];
                        let qir = q[i * n + r];
                        q[i * n + p] = c * qip - s * qir;
                        q[i * n + r] = s * qip + c * qir;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&k| (0..n).map(|i| q[i * n + k]).collect())
        .collect();
    Ok((eigenvalues, vectors))
}

/// Truncated factors of a trajectory matrix.
///
/// Layout: `singular_values[k]` is σ_{k+1}; `left_vectors[k]` is the k-th
/// column of U (length T); `right_vectors[k]` is the k-th row of Vᵀ
/// (length d, unit norm); `coefficients[t][k]` is U[t][k]·σ_k, the rank-k
/// temporal coefficient of row t.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub singular_values: Vec<f64>,
    pub left_vectors: Vec<Vec<f64>>,
    pub right_vectors: Vec<Vec<f64>>,
    pub coefficients: Vec<Vec<f64>>,
}

impl SpectralDecomposition {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }
}

/// Rank-`r` truncated SVD via the Gram matrix, computing the Gram matrix
/// from scratch.
pub fn truncated_svd(traj: &TrajectoryMatrix, r: usize) -> Result<SpectralDecomposition> {
    let gram = gram_matrix(traj)?;
    truncated_svd_from_gram(traj, &gram, r)
}

/// Rank-`r` truncated SVD reusing a precomputed Gram matrix (e.g. a cached
/// prefix from a sweep).
pub fn truncated_svd_from_gram(
    traj: &TrajectoryMatrix,
    gram: &[Vec<f64>],
    r: usize,
) -> Result<SpectralDecomposition> {
    truncated_factors(traj, gram, r, true)
}

/// As [`truncated_svd_from_gram`] but tolerating degenerate trailing
/// components: their singular values and coefficients are exact zeros and
/// their right vectors are zero vectors. Used by coefficient dumps, where
/// asking for more rank than the data carries is answerable.
pub fn truncated_svd_lenient(
    traj: &TrajectoryMatrix,
    gram: &[Vec<f64>],
    r: usize,
) -> Result<SpectralDecomposition> {
    truncated_factors(traj, gram, r, false)
}

fn truncated_factors(
    traj: &TrajectoryMatrix,
    gram: &[Vec<f64>],
    r: usize,
    strict: bool,
) -> Result<SpectralDecomposition> {
    let t = traj.len();
    assert_eq!(gram.len(), t, "gram size must match trajectory rows");
    if r < 1 || r > t {
        return Err(Error::RankOutOfRange { rank: r, max: t });
    }
    let trace: f64 = (0..t).map(|i| gram[i][i]).sum();
    if trace == 0.0 {
        return Err(Error::ZeroTrajectory(traj.tensor_name().to_string()));
    }

    let (eigenvalues, eigenvectors) = sym_eigendecomp(gram)?;
    // Gram matrices are PSD in exact arithmetic; clamp roundoff negatives
    // and values under the noise floor.
    let floor = EIGENVALUE_NOISE_FLOOR * eigenvalues[0].max(0.0);
    let sigmas: Vec<f64> = eigenvalues
        .iter()
        .map(|&l| if l <= floor { 0.0 } else { l.sqrt() })
        .collect();
    if strict && sigmas[r - 1] < DEGENERATE_SIGMA_RATIO * sigmas[0] {
        return Err(Error::NearZeroSingularValue { index: r - 1 });
    }

    let singular_values: Vec<f64> = sigmas[..r].to_vec();
    let left_vectors: Vec<Vec<f64>> = eigenvectors[..r].to_vec();

    // v_k = Mᵀ u_k / σ_k, streamed over column blocks.
    let d = traj.dim();
    let mut right_vectors = vec![vec![0.0; d]; r];
    traj.for_each_block(|offset, rows| {
        for (k, v) in right_vectors.iter_mut().enumerate() {
            let u = &left_vectors[k];
            let out = &mut v[offset..offset + rows[0].len()];
            for (ti, row) in rows.iter().enumerate() {
                let w = u[ti];
                if w == 0.0 {
                    continue;
                }
                for (o, x) in out.iter_mut().zip(*row) {
                    *o += w * x;
                }
            }
        }
    })?;
    for (k, v) in right_vectors.iter_mut().enumerate() {
        if singular_values[k] == 0.0 {
            // Degenerate component (lenient path): no recoverable direction.
            v.iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        let inv = 1.0 / singular_values[k];
        for x in v.iter_mut() {
            *x *= inv;
        }
    }

    let coefficients: Vec<Vec<f64>> = (0..t)
        .map(|ti| (0..r).map(|k| left_vectors[k][ti] * singular_values[k]).collect())
        .collect();

    Ok(SpectralDecomposition { singular_values, left_vectors, right_vectors, coefficients })
}

/// Project each trajectory row onto the given directions:
/// `out[t][k] = ⟨row_t, dirs[k]⟩`, blocked pairwise.
pub fn project_coefficients(
    traj: &TrajectoryMatrix,
    dirs: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let t = traj.len();
    let k = dirs.len();
    let mut accs: Vec<Pairwise> = (0..t * k).map(|_| Pairwise::new()).collect();
    traj.for_each_block(|offset, rows| {
        for (ti, row) in rows.iter().enumerate() {
            for (ki, dir) in dirs.iter().enumerate() {
                let seg = &dir[offset..offset + row.len()];
                let mut s = 0.0;
                for (a, b) in row.iter().zip(seg) {
                    s += a * b;
                }
                accs[ti * k + ki].push(s);
            }
        }
    })?;
    Ok((0..t).map(|ti| (0..k).map(|ki| accs[ti * k + ki].finish()).collect()).collect())
}

/// Ordinary least-squares line `c(t) = a·t + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub a: f64,
    pub b: f64,
    pub r_squared: f64,
}

impl LinearFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.a * t + self.b
    }
}

/// Closed-form line fit: a = Cov(t,c)/Var(t), b = c̄ − a·t̄, with R² from
/// the residual and total sums of squares. Constant data that is fit
/// exactly reports R² = 1; constant data with residual reports 0.
pub fn linear_fit(ts: &[f64], cs: &[f64]) -> Result<LinearFit> {
    let n = ts.len();
    if n < 2 || cs.len() != n {
        return Err(Error::TooFewPoints { needed: 2, got: n.min(cs.len()) });
    }
    let t_mean = pairwise_sum(ts) / n as f64;
    let c_mean = pairwise_sum(cs) / n as f64;
    let mut s_tt = 0.0;
    let mut s_tc = 0.0;
    for (&t, &c) in ts.iter().zip(cs) {
        let dt = t - t_mean;
        s_tt += dt * dt;
        s_tc += dt * (c - c_mean);
    }
    if s_tt == 0.0 {
        return Err(Error::DegenerateAbscissa);
    }
    let a = s_tc / s_tt;
    let b = c_mean - a * t_mean;

    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (&t, &c) in ts.iter().zip(cs) {
        let r = c - (a * t + b);
        ss_res += r * r;
        let d = c - c_mean;
        ss_tot += d * d;
    }
    let r_squared = if ss_tot == 0.0 {
        if ss_res <= 1e-24 {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(LinearFit { a, b, r_squared })
}

/// Least-squares polynomial; `coeffs[j]` multiplies t^j.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit {
    pub order: usize,
    pub coeffs: Vec<f64>,
}

impl PolyFit {
    pub fn eval(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * t + c;
        }
        acc
    }
}

/// Least-squares polynomial via normal equations on a Vandermonde basis,
/// with abscissas centered and scaled to [-1, 1] before solving. Raw step
/// values in the hundreds make the unscaled order-3 normal equations
/// hopelessly ill-conditioned. Coefficients are reported in the original
/// variable.
pub fn poly_fit(ts: &[f64], cs: &[f64], order: usize) -> Result<PolyFit> {
    assert!(order >= 1);
    let n = ts.len();
    if n < order + 1 || cs.len() != n {
        return Err(Error::TooFewPoints { needed: order + 1, got: n.min(cs.len()) });
    }
    let (min, max) = ts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| {
        (lo.min(t), hi.max(t))
    });
    let mid = 0.5 * (min + max);
    let half = 0.5 * (max - min);
    if half == 0.0 {
        return Err(Error::SingularSystem);
    }
    let scaled: Vec<f64> = ts.iter().map(|&t| (t - mid) / half).collect();

    let m = order + 1;
    let mut normal = vec![vec![0.0; m]; m];
    let mut rhs = vec![0.0; m];
    for (&s, &c) in scaled.iter().zip(cs) {
        let mut powers = vec![1.0; 2 * order + 1];
        for j in 1..=2 * order {
            powers[j] = powers[j - 1] * s;
        }
        for i in 0..m {
            for j in 0..m {
                normal[i][j] += powers[i + j];
            }
            rhs[i] += c * powers[i];
        }
    }
    let q = solve_dense(normal, rhs).ok_or(Error::SingularSystem)?;

    // Convert Σ q_j ((t-mid)/half)^j into coefficients of t.
    let lin = [-mid / half, 1.0 / half];
    let mut coeffs = vec![0.0; m];
    let mut power = vec![1.0]; // ((t-mid)/half)^j as a poly in t
    for (j, &qj) in q.iter().enumerate() {
        if j > 0 {
            let mut next = vec![0.0; power.len() + 1];
            for (i, &p) in power.iter().enumerate() {
                next[i] += p * lin[0];
                next[i + 1] += p * lin[1];
            }
            power = next;
        }
        for (i, &p) in power.iter().enumerate() {
            coeffs[i] += qj * p;
        }
    }
    Ok(PolyFit { order, coeffs })
}

/// One-component PLS1 regression of a scalar response on row features.
#[derive(Debug, Clone)]
pub struct Pls1Model {
    /// Unit weight vector, proportional to Xᵀy after centering.
    pub weights: Vec<f64>,
    /// Regression of the centered response on the scores.
    pub q: f64,
    pub x_mean: Vec<f64>,
    pub y_mean: f64,
}

impl Pls1Model {
    /// Fitted response for one feature row.
    pub fn predict_y(&self, x: &[f64]) -> f64 {
        let centered: Vec<f64> = x.iter().zip(&self.x_mean).map(|(a, m)| a - m).collect();
        self.y_mean + self.q * pairwise_dot(&centered, &self.weights)
    }

    /// Invert the score relation: the feature row whose fitted response is
    /// `y_target`, reached along the weight direction from the centroid.
    pub fn invert_x(&self, y_target: f64) -> Result<Vec<f64>> {
        if self.q == 0.0 {
            return Err(Error::DegenerateDirection);
        }
        let s = (y_target - self.y_mean) / self.q;
        Ok(self.x_mean.iter().zip(&self.weights).map(|(m, w)| m + s * w).collect())
    }
}

/// Fit a one-component PLS1 model: w ∝ X_cᵀ y_c normalized, scores
/// s = X_c w, q = ⟨s, y_c⟩ / ⟨s, s⟩.
pub fn pls1_fit(x: &[Vec<f64>], y: &[f64]) -> Result<Pls1Model> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::TooFewPoints { needed: 2, got: n.min(y.len()) });
    }
    let p = x[0].len();
    assert!(x.iter().all(|row| row.len() == p), "feature rows must share a length");

    let mut x_mean = vec![0.0; p];
    for row in x {
        for (m, v) in x_mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in x_mean.iter_mut() {
        *m /= n as f64;
    }
    let y_mean = pairwise_sum(y) / n as f64;

    let mut weights = vec![0.0; p];
    for (row, &yi) in x.iter().zip(y) {
        let yc = yi - y_mean;
        for ((w, v), m) in weights.iter_mut().zip(row).zip(&x_mean) {
            *w += yc * (v - m);
        }
    }
    let norm = pairwise_dot(&weights, &weights).sqrt();
    if norm < 1e-14 {
        return Err(Error::DegenerateDirection);
    }
    for w in weights.iter_mut() {
        *w /= norm;
    }

    let mut s_dot_y = 0.0;
    let mut s_dot_s = 0.0;
    for (row, &yi) in x.iter().zip(y) {
        let centered: Vec<f64> = row.iter().zip(&x_mean).map(|(a, m)| a - m).collect();
        let s = pairwise_dot(&centered, &weights);
        s_dot_y += s * (yi - y_mean);
        s_dot_s += s * s;
    }
    if s_dot_s == 0.0 {
        return Err(Error::DegenerateDirection);
    }
    Ok(Pls1Model { weights, q: s_dot_y / s_dot_s, x_mean, y_mean })
}
