//! Dense symmetric linear algebra over `ndarray` matrices, backed by nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2};

pub(crate) fn to_na(m: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Eigenvalues (ascending) and column eigenvectors of a symmetric matrix.
pub fn sym_eigen(m: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(to_na(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = Array1::from_shape_fn(n, |k| eig.eigenvalues[order[k]]);
    let vectors = Array2::from_shape_fn((n, n), |(i, k)| eig.eigenvectors[(i, order[k])]);
    (values, vectors)
}

/// Rebuilds `V diag(f(λ)) Vᵀ` and symmetrizes the result exactly.
pub fn sym_apply(m: ArrayView2<f64>, f: impl Fn(f64) -> f64) -> Array2<f64> {
    let (values, vectors) = sym_eigen(m);
    let scaled = &vectors * &values.mapv(f);
    let out = scaled.dot(&vectors.t());
    symmetrize(&out)
}

/// Symmetric PSD square root; negative eigenvalues are clipped to zero.
pub fn psd_sqrt(m: ArrayView2<f64>) -> Array2<f64> {
    sym_apply(m, |l| l.max(0.0).sqrt())
}

/// `(A + Aᵀ) / 2`, bit-exactly symmetric.
pub fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i <= j {
            0.5 * (a[[i, j]] + a[[j, i]])
        } else {
            0.5 * (a[[j, i]] + a[[i, j]])
        }
    })
}

/// Lower Cholesky factor, or `None` when the matrix is not positive definite.
pub fn cholesky(m: ArrayView2<f64>) -> Option<Array2<f64>> {
    to_na(m).cholesky().map(|c| from_na(&c.l()))
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: ArrayView2<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[[i, j]] * x[j];
        }
        x[i] = s / l[[i, i]];
    }
    x
}
