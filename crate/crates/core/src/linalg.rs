//! Small-matrix helpers shared by the flow and fitting layers. All matrix
//! norms in this crate are spectral (largest singular value), paired with the
//! Euclidean vector norm.

use nalgebra::{DMatrix, DVector};

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.ncols() == 1 || m.nrows() == 1 {
        return m.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    m.singular_values().max()
}

/// Flatten column-major into a plain state vector for the integrator.
pub fn mat_to_state(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

pub fn state_to_mat(rows: usize, cols: usize, state: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, state)
}

pub fn vec_to_state(v: &DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

pub fn state_to_vec(state: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(state)
}

/// Orthonormal basis of the column space of `m`, rank decided by a relative
/// singular-value cutoff. Returns an n×0 matrix for m = 0.
pub fn column_space_basis(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let svd = m.clone().svd(true, false);
    let u = svd.u.as_ref().expect("SVD with U requested");
    let smax = svd.singular_values.max();
    if smax <= 0.0 {
        return DMatrix::zeros(n, 0);
    }
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > rel_tol * smax)
        .count();
    u.columns(0, rank).into_owned()
}

/// In-place modified Gram-Schmidt on the columns. Keeps propagated subspace
/// bases well conditioned; panics only if a column collapses to zero, which
/// a linear flow cannot produce from independent columns.
pub fn orthonormalize_columns(state: &mut [f64], rows: usize) {
    let cols = state.len() / rows;
    for j in 0..cols {
        for k in 0..j {
            let dot: f64 = (0..rows)
                .map(|i| state[j * rows + i] * state[k * rows + i])
                .sum();
            for i in 0..rows {
                state[j * rows + i] -= dot * state[k * rows + i];
            }
        }
        let norm: f64 = (0..rows)
            .map(|i| state[j * rows + i] * state[j * rows + i])
            .sum::<f64>()
            .sqrt();
        assert!(norm > 0.0, "propagated basis column collapsed");
        for i in 0..rows {
            state[j * rows + i] /= norm;
        }
    }
}
