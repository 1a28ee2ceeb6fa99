//! The Gram-matrix SVD path against the independent one-sided Jacobi
//! oracle, plus the algebraic identities the decomposition must satisfy.

use relex_core::numeric::SplitMix64;
use relex_core::spectral::{gram_matrix, truncated_svd, truncated_svd_from_gram};
use relex_core::synth::jacobi_svd_oracle;
use relex_core::trajectory::TrajectoryMatrix;

fn random_traj(rng: &mut SplitMix64, t: usize, d: usize) -> TrajectoryMatrix {
    let rows: Vec<Vec<f64>> =
        (0..t).map(|_| (0..d).map(|_| rng.next_symmetric()).collect()).collect();
    TrajectoryMatrix::from_rows("t", (1..=t as u64).collect(), rows)
}

fn frob(rows: &[Vec<f64>]) -> f64 {
    rows.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn gram_path_matches_oracle_on_random_matrices() {
    let mut rng = SplitMix64::new(2024);
    for case in 0..100 {
        let t = 2 + (rng.next_u64() % 7) as usize; // 2..=8
        let d = 4 + (rng.next_u64() % 61) as usize; // 4..=64
        let r_max = t.min(d); // ranks beyond min(T, d) are exact zeros
        let traj = random_traj(&mut rng, t, d);
        let main = truncated_svd(&traj, r_max).expect("svd");
        let rows: Vec<Vec<f64>> = (0..t).map(|i| traj.row(i).unwrap()).collect();
        let oracle = jacobi_svd_oracle(&rows).expect("oracle");

        let s1 = main.singular_values[0];
        for k in 0..r_max {
            let a = main.singular_values[k];
            let b = oracle.singular_values[k];
            assert!(
                (a - b).abs() <= 1e-9 * b.max(1e-300),
                "case {case}: sigma {k} mismatch {a} vs {b}"
            );
        }
        for k in r_max..t {
            assert!(oracle.singular_values[k] <= 1e-9 * s1);
        }

        // Right vectors for non-degenerate components (relative gap at
        // least 1e-6) must match up to sign.
        for k in 0..r_max {
            let prev_gap = if k == 0 { f64::INFINITY } else {
                main.singular_values[k - 1] - main.singular_values[k]
            };
            let next_gap = if k + 1 == r_max { f64::INFINITY } else {
                main.singular_values[k] - main.singular_values[k + 1]
            };
            if prev_gap.min(next_gap) < 1e-6 * s1 {
                continue;
            }
            let cos: f64 = main.right_vectors[k]
                .iter()
                .zip(&oracle.right[k])
                .map(|(a, b)| a * b)
                .sum();
            assert!(
                cos.abs() >= 1.0 - 1e-9,
                "case {case}: right vector {k} misaligned, |cos| = {}",
                cos.abs()
            );
        }
    }
}

#[test]
fn eckart_young_residual_equals_tail_energy() {
    let mut rng = SplitMix64::new(7_777);
    for _ in 0..20 {
        let t = 3 + (rng.next_u64() % 5) as usize;
        let d = 16 + (rng.next_u64() % 33) as usize;
        let traj = random_traj(&mut rng, t, d);
        let full = truncated_svd(&traj, t).unwrap();
        let total_sq: f64 = full.singular_values.iter().map(|s| s * s).sum();
        for r in 1..=t {
            let dec = truncated_svd(&traj, r).unwrap();
            let mut resid_sq = 0.0;
            for ti in 0..t {
                let row = traj.row(ti).unwrap();
                for (i, &x) in row.iter().enumerate() {
                    let rec: f64 =
                        (0..r).map(|k| dec.coefficients[ti][k] * dec.right_vectors[k][i]).sum();
                    resid_sq += (x - rec) * (x - rec);
                }
            }
            let tail_sq: f64 = full.singular_values[r..].iter().map(|s| s * s).sum();
            assert!(
                (resid_sq - tail_sq).abs() <= 1e-8 * total_sq,
                "rank {r}: residual {resid_sq} vs tail {tail_sq}"
            );
        }
    }
}

#[test]
fn subspace_principal_angles_small() {
    // sin of the largest principal angle bounded by the Frobenius norm of
    // the residual of one basis projected off the other.
    let mut rng = SplitMix64::new(99);
    let traj = random_traj(&mut rng, 6, 40);
    for r in 1..=6 {
        let main = truncated_svd(&traj, r).unwrap();
        let rows: Vec<Vec<f64>> = (0..6).map(|i| traj.row(i).unwrap()).collect();
        let oracle = jacobi_svd_oracle(&rows).unwrap();
        let mut resid_sq = 0.0;
        for b in oracle.right[..r].iter() {
            let mut res = b.clone();
            for a in &main.right_vectors {
                let dot: f64 = b.iter().zip(a).map(|(x, y)| x * y).sum();
                for (rx, ax) in res.iter_mut().zip(a) {
                    *rx -= dot * ax;
                }
            }
            resid_sq += res.iter().map(|v| v * v).sum::<f64>();
        }
        assert!(resid_sq.sqrt() <= 1e-7, "rank {r}: sin(theta) = {}", resid_sq.sqrt());
    }
}

#[test]
fn projection_identity_and_orthonormality() {
    let mut rng = SplitMix64::new(31);
    for _ in 0..10 {
        let t = 2 + (rng.next_u64() % 6) as usize;
        let d = 8 + (rng.next_u64() % 57) as usize;
        let traj = random_traj(&mut rng, t, d);
        let dec = truncated_svd(&traj, t.min(3)).unwrap();

        for v in &dec.right_vectors {
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-10);
        }
        for i in 0..dec.rank() {
            for j in i + 1..dec.rank() {
                let dot: f64 =
                    dec.right_vectors[i].iter().zip(&dec.right_vectors[j]).map(|(a, b)| a * b).sum();
                assert!(dot.abs() <= 1e-8, "v{i}·v{j} = {dot}");
            }
        }

        // coefficients[t][0] equals the projection onto v1.
        for ti in 0..t {
            let row = traj.row(ti).unwrap();
            let proj: f64 = row.iter().zip(&dec.right_vectors[0]).map(|(a, b)| a * b).sum();
            let c = dec.coefficients[ti][0];
            assert!((proj - c).abs() <= 1e-9 * c.abs().max(1e-12));
        }
    }
}

#[test]
fn gram_prefix_slice_is_bitwise_stable() {
    // The Gram matrix of a window prefix equals the leading block of the
    // full window's Gram matrix, bit for bit; this is what makes the sweep
    // cache exact.
    let mut rng = SplitMix64::new(555);
    let traj = random_traj(&mut rng, 8, 300);
    let full = gram_matrix(&traj).unwrap();
    for k in 1..=8usize {
        let sub = gram_matrix(&traj.prefix(k)).unwrap();
        for i in 0..k {
            for j in 0..k {
                assert_eq!(sub[i][j].to_bits(), full[i][j].to_bits());
            }
        }
        // And the decomposition from the sliced Gram agrees with the one
        // computed from scratch on the prefix.
        if k >= 2 {
            let sliced: Vec<Vec<f64>> =
                full[..k].iter().map(|row| row[..k].to_vec()).collect();
            let a = truncated_svd_from_gram(&traj.prefix(k), &sliced, 1).unwrap();
            let b = truncated_svd(&traj.prefix(k), 1).unwrap();
            assert_eq!(a.singular_values[0].to_bits(), b.singular_values[0].to_bits());
            for (x, y) in a.right_vectors[0].iter().zip(&b.right_vectors[0]) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

#[test]
fn explained_variance_and_coefficient_energy_match_oracle() {
    let mut rng = SplitMix64::new(606);
    let traj = random_traj(&mut rng, 5, 32);
    let dec = truncated_svd(&traj, 5).unwrap();
    let rows: Vec<Vec<f64>> = (0..5).map(|i| traj.row(i).unwrap()).collect();
    let oracle = jacobi_svd_oracle(&rows).unwrap();

    // Explained-variance fractions against oracle σ².
    let total: f64 = oracle.singular_values.iter().map(|s| s * s).sum();
    let fractions = relex_core::diagnostics::explained_variance(&dec);
    for (k, f) in fractions.iter().enumerate() {
        let want = oracle.singular_values[k] * oracle.singular_values[k] / total;
        assert!((f - want).abs() <= 1e-10, "component {k}: {f} vs {want}");
    }
    assert!((fractions.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    assert!(fractions.windows(2).all(|w| w[0] >= w[1] - 1e-15));

    // Per-component coefficient energy equals σ² (Parseval over the rows).
    for k in 0..5 {
        let energy: f64 = dec.coefficients.iter().map(|row| row[k] * row[k]).sum();
        let want = oracle.singular_values[k] * oracle.singular_values[k];
        assert!((energy - want).abs() <= 1e-10 * total, "component {k}: {energy} vs {want}");
    }
}

#[test]
fn oracle_sigma_squared_matches_gram_trace() {
    let mut rng = SplitMix64::new(4321);
    let traj = random_traj(&mut rng, 5, 30);
    let rows: Vec<Vec<f64>> = (0..5).map(|i| traj.row(i).unwrap()).collect();
    let oracle = jacobi_svd_oracle(&rows).unwrap();
    let gram = gram_matrix(&traj).unwrap();
    let trace: f64 = (0..5).map(|i| gram[i][i]).sum();
    let sum_sq: f64 = oracle.singular_values.iter().map(|s| s * s).sum();
    assert!((trace - sum_sq).abs() <= 1e-10 * trace);
    assert!(frob(&rows) > 0.0);
}
