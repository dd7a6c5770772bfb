//! Shared oracle routines for the test suites.
//!
//! These deliberately avoid the production solver paths: linear systems go
//! through a hand-rolled Gauss-Jordan elimination, eigenvalues through
//! inverse power iteration, so golden values checked against them are
//! independent of nalgebra's LU/eigen code used by the library.

use nalgebra::{DMatrix, DVector};

use crate::mdp::{Mdp, Policy};

/// Dense solve of `A x = b` by Gauss-Jordan elimination with partial
/// pivoting.
pub(crate) fn eliminate(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.nrows();
    let mut m = DMatrix::zeros(n, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(a);
    m.set_column(n, b);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().partial_cmp(&m[(j, col)].abs()).unwrap())
            .unwrap();
        m.swap_rows(col, pivot);
        let d = m[(col, col)];
        for j in col..=n {
            m[(col, j)] /= d;
        }
        for i in 0..n {
            if i != col {
                let f = m[(i, col)];
                if f != 0.0 {
                    for j in col..=n {
                        m[(i, j)] -= f * m[(col, j)];
                    }
                }
            }
        }
    }
    m.column(n).into_owned()
}

/// Policy evaluation oracle: solve `(I - gamma P_pi) Q = R` by elimination,
/// returning the flat pair-ordered Q vector.
pub(crate) fn oracle_policy_eval(mdp: &Mdp, policy: &Policy) -> DVector<f64> {
    let n = mdp.n_pairs();
    let a = DMatrix::identity(n, n) - mdp.pair_transition(policy).unwrap() * mdp.gamma();
    eliminate(&a, &mdp.reward_vector())
}

/// Minimum eigenvalue of a symmetric positive definite matrix by inverse
/// power iteration (solves via `eliminate`).
pub(crate) fn min_eigenvalue_inverse_power(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    let mut x = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let y = eliminate(g, &x);
        let norm = y.norm();
        x = y / norm;
        let next = x.dot(&(g * &x));
        if (next - lambda).abs() <= 1e-14 * next.abs().max(1.0) {
            return next;
        }
        lambda = next;
    }
    lambda
}
