//! Shape-space entropy of the cohort, computed in the N x N dual space.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Returns `(G, Y)`: the centered data `Y` and the dual Gram matrix
/// `G = Y Y^T / (N - 1)`.
pub fn gram_matrix(z: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = z.nrows();
    let mut y = z.clone();
    for mut col in y.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
    }
    let denom = (n.max(2) - 1) as f64;
    let g = (&y * y.transpose()) / denom;
    (g, y)
}

/// Eigenvalues of the dual Gram matrix, descending, with round-off negatives set to 0.
pub fn correspondence_eigenvalues(z: &DMatrix<f64>) -> Vec<f64> {
    let (g, _) = gram_matrix(z);
    let mut ev: Vec<f64> = SymmetricEigen::new(g).eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

fn regularized_cholesky(g: DMatrix<f64>, alpha: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("regularization must be >= 0, got {alpha}")));
    }
    let n = g.nrows();
    let k = g + DMatrix::identity(n, n) * alpha;
    k.cholesky().ok_or_else(|| {
        Error::Numerical(format!(
            "regularized shape covariance is not positive definite (alpha = {alpha:e}); increase the regularization"
        ))
    })
}

/// `H(Z) = 1/2 * sum_k log(lambda_k + alpha)` over the N eigenvalues of the dual
/// Gram matrix, i.e. `1/2 log det(G + alpha I)`. Zero for a single shape.
pub fn correspondence_entropy(z: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    if z.nrows() < 2 {
        return Ok(0.0);
    }
    let (g, _) = gram_matrix(z);
    let chol = regularized_cholesky(g, alpha)?;
    let l = chol.l_dirty();
    Ok((0..z.nrows()).map(|i| l[(i, i)].ln()).sum())
}

/// Gradient of [`correspondence_entropy`] with respect to every entry of `z`:
/// `(G + alpha I)^-1 Y / (N - 1)`. Rows sum to zero. All zeros for a single shape.
pub fn correspondence_gradient(z: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    let n = z.nrows();
    if n < 2 {
        return Ok(DMatrix::zeros(n, z.ncols()));
    }
    let (g, y) = gram_matrix(z);
    let chol = regularized_cholesky(g, alpha)?;
    Ok(chol.solve(&y) / (n - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn identical_rows_give_log_alpha() {
        let row = random(1, 6, 1);
        let z = DMatrix::from_fn(4, 6, |_, c| row[(0, c)]);
        assert!(correspondence_eigenvalues(&z).iter().all(|&l| l < 1e-15));
        let h = correspondence_entropy(&z, 0.1).unwrap();
        assert!((h - 2.0 * 0.1f64.ln()).abs() < 1e-12);
        let g = correspondence_gradient(&z, 0.1).unwrap();
        assert!(g.amax() < 1e-12);
    }

    #[test]
    fn two_clusters_rank_one() {
        let a = random(1, 9, 2);
        let b = random(1, 9, 3);
        let z = DMatrix::from_fn(6, 9, |r, c| if r < 3 { a[(0, c)] } else { b[(0, c)] });
        let ev = correspondence_eigenvalues(&z);
        assert!(ev[0] > 1e-3);
        assert!(ev[1..].iter().all(|&l| l < 1e-12 * ev[0]));
    }

    #[test]
    fn dual_matches_primal_spectrum() {
        let z = random(5, 12, 4);
        let n = 5;
        let mean = z.row_mean();
        let y = DMatrix::from_fn(5, 12, |r, c| z[(r, c)] - mean[c]);
        let cov = y.transpose() * &y / (n - 1) as f64;
        let mut primal: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        primal.sort_by(|a, b| b.total_cmp(a));
        let dual = correspondence_eigenvalues(&z);
        for k in 0..n {
            assert!((primal[k].max(0.0) - dual[k]).abs() < 1e-9, "{k}: {} vs {}", primal[k], dual[k]);
        }
        let h = correspondence_entropy(&z, 0.05).unwrap();
        let expected: f64 = dual.iter().map(|l| 0.5 * (l + 0.05).ln()).sum();
        assert!((h - expected).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let z = random(4, 9, 100 + seed);
            let alpha = 0.1;
            let g = correspondence_gradient(&z, alpha).unwrap();
            for r in 0..4 {
                for c in 0..9 {
                    let h = 1e-5;
                    let mut p = z.clone();
                    p[(r, c)] += h;
                    let mut m = z.clone();
                    m[(r, c)] -= h;
                    let fd = (correspondence_entropy(&p, alpha).unwrap()
                        - correspondence_entropy(&m, alpha).unwrap())
                        / (2.0 * h);
                    assert!((fd - g[(r, c)]).abs() <= 1e-4 * g.row(r).norm().max(1e-8));
                }
            }
        }
    }

    #[test]
    fn two_shapes_are_antisymmetric() {
        let z = random(2, 6, 7);
        let g = correspondence_gradient(&z, 0.1).unwrap();
        for c in 0..6 {
            assert!((g[(0, c)] + g[(1, c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_decreases_as_shapes_converge() {
        let z = random(4, 6, 8);
        let mean = z.row_mean();
        let mut last = f64::INFINITY;
        for k in 0..6 {
            let s = 1.0 - 0.15 * k as f64;
            let zs = DMatrix::from_fn(4, 6, |r, c| mean[c] + s * (z[(r, c)] - mean[c]));
            let h = correspondence_entropy(&zs, 1e-3).unwrap();
            assert!(h < last);
            last = h;
        }
    }

    #[test]
    fn zero_alpha_on_degenerate_data_is_an_error() {
        let z = DMatrix::from_element(3, 6, 1.0);
        assert!(matches!(correspondence_entropy(&z, 0.0), Err(Error::Numerical(_))));
        assert!(correspondence_entropy(&z, -1.0).is_err());
        assert_eq!(correspondence_entropy(&random(1, 6, 1), 0.1).unwrap(), 0.0);
    }
}
