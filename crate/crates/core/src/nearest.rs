//! Nearest positive semidefinite / correlation matrix by alternating
//! projections with Dykstra's correction (Higham's algorithm).
//!
//! In correlation mode the iteration alternates between the PSD cone
//! (eigenvalue clipping) and the affine set of unit-diagonal matrices; the
//! Dykstra increment is applied before the cone projection only, since the
//! unit-diagonal set is affine. In correlation mode the cone is
//! `{eigenvalues >= tol}` rather than the PSD cone: restoring the diagonal
//! after clipping at exactly zero leaves eigenvalues a hair below zero, and
//! the iteration can stall just outside the `-tol` bound.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 200;
/// Iteration stops once a step moves less than this, relative to the
/// iterate's Frobenius norm.
pub const STEP_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct NearestPd {
    pub matrix: DMatrix<f64>,
    pub repaired: bool,
    pub iterations: usize,
    /// The iteration cap was hit before the iterate met the eigenvalue
    /// bound, so the result was clipped at `tol` and, in correlation mode,
    /// rescaled to unit diagonal. Rescaling by a positive diagonal keeps the
    /// matrix PSD.
    pub finished_by_clipping: bool,
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(a)).eigenvalues.min()
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn project_psd(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= clipped[j];
    }
    symmetrize(&(scaled * q.transpose()))
}

fn project_unit_diagonal(a: &mut DMatrix<f64>) {
    for i in 0..a.nrows() {
        a[(i, i)] = 1.0;
    }
}

/// Nearest matrix with smallest eigenvalue `>= -tol`. With `unit_diagonal`
/// the result is also a correlation matrix. Inputs that already satisfy the
/// eigenvalue bound are returned unchanged. Never fails on square symmetric
/// input: see [`NearestPd::finished_by_clipping`].
pub fn nearest_pd(a: &DMatrix<f64>, unit_diagonal: bool, tol: f64) -> Result<NearestPd> {
    nearest_pd_capped(a, unit_diagonal, tol, MAX_ITERATIONS)
}

fn nearest_pd_capped(a: &DMatrix<f64>, unit_diagonal: bool, tol: f64, max_iterations: usize) -> Result<NearestPd> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "nearest_pd input",
            expected: n,
            actual: a.ncols(),
        });
    }
    let scale = a.abs().max().max(1.0);
    let asymmetry = (a - a.transpose()).abs().max();
    if asymmetry > 1e-12 * scale {
        return Err(Error::NotSymmetric { asymmetry });
    }
    if min_eigenvalue(a) >= -tol {
        return Ok(NearestPd {
            matrix: a.clone(),
            repaired: false,
            iterations: 0,
            finished_by_clipping: false,
        });
    }

    let mut y = symmetrize(a);
    let mut x = y.clone();
    let mut correction = DMatrix::zeros(n, n);
    let floor = if unit_diagonal { tol } else { 0.0 };
    let mut iterations = max_iterations;
    for it in 1..=max_iterations {
        let r = &y - &correction;
        let x_next = project_psd(&r, floor);
        correction = &x_next - &r;
        let mut y_next = x_next.clone();
        if unit_diagonal {
            project_unit_diagonal(&mut y_next);
        }
        let step = (&x_next - &x).norm().max((&y_next - &y).norm());
        x = x_next;
        y = y_next;
        if step < STEP_TOL * y.norm().max(1.0) {
            iterations = it;
            break;
        }
    }
    let feasible = Cholesky::new(&y + DMatrix::identity(n, n) * tol).is_some() || min_eigenvalue(&y) >= -tol;
    if !feasible {
        log::debug!("nearest_pd: finishing {n}x{n} matrix by clipping after {iterations} iterations");
        y = project_psd(&y, floor);
        if unit_diagonal {
            let d: Vec<f64> = (0..n).map(|i| y[(i, i)].sqrt()).collect();
            y = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { y[(i, j)] / (d[i] * d[j]) });
        }
    }
    Ok(NearestPd {
        matrix: y,
        repaired: true,
        iterations,
        finished_by_clipping: !feasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_is_a_fixed_point() {
        let out = nearest_pd(&DMatrix::identity(4, 4), true, 1e-8).unwrap();
        assert!(!out.repaired);
        assert_eq!(out.matrix, DMatrix::identity(4, 4));
    }

    #[test]
    fn pd_input_is_returned_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let p = &g * g.transpose() + DMatrix::identity(5, 5) * 0.1;
        let out = nearest_pd(&p, false, 1e-8).unwrap();
        assert_eq!(out.matrix, p);
    }

    /// Closed-form 2x2 oracle: the feasible off-diagonals of a 2x2
    /// correlation matrix are [-1, 1], so the Frobenius-nearest one clips the
    /// off-diagonal. Brute-force a fine grid to confirm independently.
    #[test]
    fn two_by_two_correlation_oracle() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.2, 1.2, 1.0]);
        let out = nearest_pd(&a, true, 1e-8).unwrap();
        assert!(out.repaired);
        let best = (0..=200_000)
            .map(|i| -1.0 + i as f64 * 1e-5)
            .min_by(|x, y| (2.0 * (1.2 - x) * (1.2 - x)).total_cmp(&(2.0 * (1.2 - y) * (1.2 - y))))
            .unwrap();
        assert!((out.matrix[(0, 1)] - best).abs() < 1e-6);
        assert!((out.matrix[(0, 1)] - 1.0).abs() < 1e-6);
        assert_eq!(out.matrix[(0, 0)], 1.0);
        assert!(min_eigenvalue(&out.matrix) >= -1e-8);
    }

    #[test]
    fn non_correlation_mode_clips_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let out = nearest_pd(&a, false, 1e-8).unwrap();
        // eigenvalues 3 and -1; clipping gives 1.5 * [[1,1],[1,1]]
        assert!((out.matrix[(0, 0)] - 1.5).abs() < 1e-12);
        assert!((out.matrix[(0, 1)] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 1.0]);
        assert!(matches!(nearest_pd(&a, true, 1e-8), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn nearest_is_idempotent_and_beats_random_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.5..1.5));
            a = symmetrize(&a);
            for i in 0..3 {
                a[(i, i)] = 1.0;
            }
            if min_eigenvalue(&a) >= -1e-8 {
                continue;
            }
            let x = nearest_pd(&a, true, 1e-8).unwrap().matrix;
            let again = nearest_pd(&x, true, 1e-8).unwrap().matrix;
            assert!((&again - &x).norm() < 1e-8);
            let d = (&a - &x).norm();
            for _ in 0..1000 {
                let g = DMatrix::<f64>::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
                let s = &g * g.transpose();
                let b = DMatrix::from_fn(3, 3, |i, j| s[(i, j)] / (s[(i, i)] * s[(j, j)]).sqrt());
                assert!(d <= (&a - &b).norm() + 1e-9);
            }
        }
    }

    #[test]
    fn iteration_cap_still_yields_a_correlation_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = DMatrix::<f64>::from_fn(30, 4, |_, _| rng.random_range(-1.0..1.0));
        let mut a = &g * g.transpose();
        for i in 0..30 {
            for j in 0..30 {
                if i != j {
                    a[(i, j)] = (a[(i, j)] / (a[(i, i)] * a[(j, j)]).sqrt() + rng.random_range(-0.3..0.3)).clamp(-1.0, 1.0);
                }
            }
        }
        a = symmetrize(&a);
        for i in 0..30 {
            a[(i, i)] = 1.0;
        }
        assert!(min_eigenvalue(&a) < -1e-3);
        let out = nearest_pd_capped(&a, true, 1e-8, 1).unwrap();
        assert!(out.finished_by_clipping);
        assert!(min_eigenvalue(&out.matrix) >= -1e-8);
        assert!((0..30).all(|i| (out.matrix[(i, i)] - 1.0).abs() < 1e-12));
        let full = nearest_pd(&a, true, 1e-8).unwrap();
        assert!(min_eigenvalue(&full.matrix) >= -1e-8);
        assert!((&a - &full.matrix).norm() <= (&a - &out.matrix).norm() + 1e-9);
    }
}
