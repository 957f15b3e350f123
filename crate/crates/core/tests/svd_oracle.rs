//! Jacobi SVD against an eigendecomposition of the Gram matrix (nalgebra).

use hime_core::numerics::{svd_thin, Matrix};
use hime_core::subspace::extract_subspace;
use nalgebra::{DMatrix, SymmetricEigen};
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

fn unit(rng: &mut SplitMix64) -> f64 {
    2.0 * ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64) - 1.0
}

fn random(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| unit(rng))
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Singular values from the eigenvalues of the smaller Gram matrix, descending.
fn gram_singular_values(m: &Matrix) -> Vec<f64> {
    let a = to_na(m);
    let g = if a.nrows() >= a.ncols() {
        a.transpose() * &a
    } else {
        &a * a.transpose()
    };
    let mut ev: Vec<f64> = SymmetricEigen::new(g)
        .eigenvalues
        .iter()
        .map(|&e| e.max(0.0).sqrt())
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

#[test]
fn seed_42_five_by_three() {
    let mut rng = SplitMix64::seed_from_u64(42);
    let m = random(5, 3, &mut rng);
    let svd = svd_thin(&m).unwrap();
    let want = gram_singular_values(&m);
    assert_eq!(svd.sigma.len(), 3);
    for (s, w) in svd.sigma.iter().zip(&want) {
        assert!((s - w).abs() < 1e-9, "{s} vs {w}");
    }
    assert!(svd.reconstruct().sub(&m).unwrap().frobenius_norm() <= 1e-8 * m.frobenius_norm());
}

#[test]
fn small_min_dimension_suite() {
    let mut rng = SplitMix64::seed_from_u64(2024);
    for case in 0..200 {
        let small = 1 + (rng.next_u64() % 4) as usize;
        let large = 1 + (rng.next_u64() % 12) as usize;
        let (r, c) = if case % 2 == 0 {
            (small, large)
        } else {
            (large, small)
        };
        let m = random(r, c, &mut rng);
        let svd = svd_thin(&m).unwrap();
        let want = gram_singular_values(&m);
        for (s, w) in svd.sigma.iter().zip(&want) {
            assert!((s - w).abs() < 1e-9, "case {case} ({r}x{c}): {s} vs {w}");
        }
    }
}

#[test]
fn rank_two_span_matches_gram_eigenvectors() {
    let d = 6;
    let n = 5;
    let s2 = 0.5f64.sqrt();
    let d1 = [s2, s2, 0.0, 0.0, 0.0, 0.0];
    let d2 = [0.0, 0.0, 0.6, 0.0, 0.8, 0.0];
    let a = [0.5, 0.5, 0.5, 0.5, 0.0];
    let b = [0.5, -0.5, 0.5, -0.5, 0.0];
    let z = Matrix::from_fn(n, d, |i, j| 5.0 * a[i] * d1[j] + 3.0 * b[i] * d2[j]);

    let s = extract_subspace(1, &z, 2).unwrap();
    assert!((s.singular_values[0] - 5.0).abs() < 1e-12);
    assert!((s.singular_values[1] - 3.0).abs() < 1e-12);

    // sin of the largest principal angle = ||(I - D Dᵀ) V||_2 <= ||.||_F
    let dmat = Matrix::from_fn(d, 2, |r, c| if c == 0 { d1[r] } else { d2[r] });
    let proj = dmat
        .matmul(&dmat.transpose().matmul(&s.basis).unwrap())
        .unwrap();
    let sin_max = s.basis.sub(&proj).unwrap().frobenius_norm();
    assert!(sin_max < 1e-8, "{sin_max}");

    let eig = SymmetricEigen::new(to_na(&z.gram()));
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    for &i in &idx[..2] {
        let e: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let ev = Matrix::from_fn(d, 1, |r, _| e[r]);
        let back = s
            .basis
            .matmul(&s.basis.transpose().matmul(&ev).unwrap())
            .unwrap();
        assert!(ev.sub(&back).unwrap().frobenius_norm() < 1e-8);
    }
}
