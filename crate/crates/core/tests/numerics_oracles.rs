use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clusterharm::numerics::{ols_solve, pca_project, Matrix};
use clusterharm::Error;

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, q: usize) -> Matrix {
    Matrix::from_fn(n, q, |_, _| rng.gen_range(-3.0..3.0))
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.nrows(), m.ncols(), m.as_slice())
}

#[test]
fn ols_intercept_is_the_mean() {
    let design = Matrix::from_vec(3, 1, vec![1.0; 3]).unwrap();
    let sol = ols_solve(&design, &[1.0, 2.0, 3.0], 0.0).unwrap();
    assert_abs_diff_eq!(sol.coefficients[0], 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(sol.residual_variance, 2.0 / 3.0, epsilon = 1e-12);
}

#[test]
fn ols_exact_fit() {
    let sol = ols_solve(&Matrix::identity(2), &[4.0, 5.0], 0.0).unwrap();
    assert_abs_diff_eq!(sol.coefficients[0], 4.0, epsilon = 1e-12);
    assert_abs_diff_eq!(sol.coefficients[1], 5.0, epsilon = 1e-12);
    assert_abs_diff_eq!(sol.residual_variance, 0.0, epsilon = 1e-20);
}

#[test]
fn ols_matches_pseudo_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let a = random_matrix(&mut rng, 50, 4);
        let y: Vec<f64> = (0..50).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let sol = ols_solve(&a, &y, 0.0).unwrap();
        let pinv = to_na(&a).pseudo_inverse(1e-14).unwrap();
        let oracle = pinv * DVector::from_vec(y.clone());
        for (c, o) in sol.coefficients.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(*c, *o, epsilon = 1e-8);
        }
    }
}

#[test]
fn ridge_matches_regularized_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_matrix(&mut rng, 20, 3);
    let y: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let na = to_na(&a);
    let lhs = na.transpose() * &na + DMatrix::identity(3, 3) * 0.7;
    let oracle = lhs.lu().solve(&(na.transpose() * DVector::from_vec(y.clone()))).unwrap();
    let sol = ols_solve(&a, &y, 0.7).unwrap();
    for (c, o) in sol.coefficients.iter().zip(oracle.iter()) {
        assert_abs_diff_eq!(*c, *o, epsilon = 1e-10);
    }
}

#[test]
fn singular_design_asks_for_ridge() {
    let a = Matrix::from_vec(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
    assert!(matches!(ols_solve(&a, &[1.0, 2.0, 3.0], 0.0), Err(Error::RankDeficient)));
    assert!(ols_solve(&a, &[1.0, 2.0, 3.0], 1e-8).is_ok());
}

proptest! {
    #[test]
    fn residuals_are_orthogonal_to_the_design(seed in any::<u64>(), n in 6usize..40, q in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, n, q);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        if let Ok(sol) = ols_solve(&a, &y, 0.0) {
            let fitted = a.mul_vec(&sol.coefficients);
            let resid: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
            for v in a.t_mul_vec(&resid) {
                prop_assert!(v.abs() < 1e-8, "Aᵀr = {v}");
            }
            prop_assert!(sol.residual_variance >= 0.0);
        }
    }

    #[test]
    fn pca_components_are_uncorrelated(seed in any::<u64>(), n in 5usize..30, g in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_matrix(&mut rng, n, g);
        let k = g.min(n).min(3);
        let pca = pca_project(&data, k).unwrap();
        for a in 0..k {
            for b in (a + 1)..k {
                let (x, y) = (pca.scores.column(a), pca.scores.column(b));
                let cov: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum::<f64>() / (n - 1) as f64;
                prop_assert!(cov.abs() < 1e-8, "cov = {cov}");
            }
        }
        for w in pca.explained_variance.windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-12);
        }
    }
}

#[test]
fn pca_rank_one() {
    let data = Matrix::from_fn(10, 2, |i, j| if j == 0 { i as f64 } else { 2.0 * i as f64 });
    let pca = pca_project(&data, 1).unwrap();
    assert_abs_diff_eq!(pca.explained_variance[0], pca.total_variance, epsilon = 1e-9);
    let two = pca_project(&data, 2).unwrap();
    assert!(two.scores.column(1).iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn pca_complete_decomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = random_matrix(&mut rng, 12, 5);
    let pca = pca_project(&data, 5).unwrap();
    let sum: f64 = pca.explained_variance.iter().sum();
    assert_abs_diff_eq!(sum, pca.total_variance, epsilon = 1e-8);
}

#[test]
fn pca_matches_dense_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data = random_matrix(&mut rng, 30, 10);
    let pca = pca_project(&data, 2).unwrap();

    let x = to_na(&data);
    let means = x.row_mean();
    let centered = DMatrix::from_fn(30, 10, |i, j| x[(i, j)] - means[j]);
    let cov = centered.transpose() * &centered / 29.0;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..10).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (c, &idx) in order.iter().take(2).enumerate() {
        assert_abs_diff_eq!(pca.explained_variance[c], eig.eigenvalues[idx], epsilon = 1e-6);
        let v = eig.eigenvectors.column(idx);
        let proj = &centered * v;
        let ours = pca.scores.column(c);
        let sign = if ours.iter().zip(proj.iter()).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        for (a, b) in ours.iter().zip(proj.iter()) {
            assert_abs_diff_eq!(*a, sign * b, epsilon = 1e-6);
        }
        // sign convention: the largest-magnitude loading is positive
        let load = pca.components.column(c);
        let top = load.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        assert!(top > 0.0);
    }
}

#[test]
fn pca_rejects_bad_k() {
    let data = Matrix::zeros(4, 3);
    assert!(pca_project(&data, 4).is_err());
    assert!(pca_project(&data, 0).is_err());
    assert!(pca_project(&Matrix::zeros(1, 3), 1).is_err());
}
