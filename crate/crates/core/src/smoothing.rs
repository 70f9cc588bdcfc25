//! First-difference operators on mesh fields and fast solves with
//! `c I + w_tau L_tau^T L_tau + w_y L_y^T L_y`.
//!
//! `L_tau^T L_tau` and `L_y^T L_y` are Kronecker products of 1-D path-graph
//! Laplacians with identities. Both 1-D Laplacians are diagonalized by the
//! DCT-II basis, so the combined operator is diagonal in the tensor basis.

use ndarray::{Array1, Array2};

/// `a[i][j] - a[i-1][j]` for `i >= 1`; shape `(n_tau - 1, n_y)`.
pub fn diff_tau(a: &Array2<f64>) -> Array2<f64> {
    let (n_tau, n_y) = a.dim();
    Array2::from_shape_fn((n_tau.saturating_sub(1), n_y), |(i, j)| a[[i + 1, j]] - a[[i, j]])
}

/// `a[i][j] - a[i][j-1]` for `j >= 1`; shape `(n_tau, n_y - 1)`.
pub fn diff_y(a: &Array2<f64>) -> Array2<f64> {
    let (n_tau, n_y) = a.dim();
    Array2::from_shape_fn((n_tau, n_y.saturating_sub(1)), |(i, j)| a[[i, j + 1]] - a[[i, j]])
}

/// Adjoint of [`diff_tau`].
pub fn diff_tau_transpose(r: &Array2<f64>, n_tau: usize) -> Array2<f64> {
    let n_y = r.ncols();
    let mut out = Array2::zeros((n_tau, n_y));
    for i in 0..r.nrows() {
        for j in 0..n_y {
            out[[i + 1, j]] += r[[i, j]];
            out[[i, j]] -= r[[i, j]];
        }
    }
    out
}

/// Adjoint of [`diff_y`].
pub fn diff_y_transpose(r: &Array2<f64>, n_y: usize) -> Array2<f64> {
    let n_tau = r.nrows();
    let mut out = Array2::zeros((n_tau, n_y));
    for i in 0..n_tau {
        for j in 0..r.ncols() {
            out[[i, j + 1]] += r[[i, j]];
            out[[i, j]] -= r[[i, j]];
        }
    }
    out
}

/// Orthonormal eigenbasis (columns) and eigenvalues of the `n`-node path
/// Laplacian.
fn path_laplacian_eigen(n: usize) -> (Array2<f64>, Array1<f64>) {
    let nf = n as f64;
    let basis = Array2::from_shape_fn((n, n), |(i, k)| {
        let norm = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        norm * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / nf).cos()
    });
    let eig = Array1::from_shape_fn(n, |k| {
        let s = (std::f64::consts::PI * k as f64 / (2.0 * nf)).sin();
        4.0 * s * s
    });
    (basis, eig)
}

/// Spectral representation of the separable smoothing operator on an
/// `(n_tau, n_y)` grid.
#[derive(Debug, Clone)]
pub struct SeparableLaplacian {
    basis_tau: Array2<f64>,
    eig_tau: Array1<f64>,
    basis_y: Array2<f64>,
    eig_y: Array1<f64>,
}

impl SeparableLaplacian {
    pub fn new(n_tau: usize, n_y: usize) -> Self {
        let (basis_tau, eig_tau) = path_laplacian_eigen(n_tau);
        let (basis_y, eig_y) = path_laplacian_eigen(n_y);
        Self { basis_tau, eig_tau, basis_y, eig_y }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.eig_tau.len(), self.eig_y.len())
    }

    /// Applies `f(lambda_tau, lambda_y)` as a spectral multiplier.
    pub fn apply_spectral<F: Fn(f64, f64) -> f64>(&self, x: &Array2<f64>, f: F) -> Array2<f64> {
        let mut hat = self.basis_tau.t().dot(x).dot(&self.basis_y);
        for ((p, q), v) in hat.indexed_iter_mut() {
            *v *= f(self.eig_tau[p], self.eig_y[q]);
        }
        self.basis_tau.dot(&hat).dot(&self.basis_y.t())
    }

    /// Solves `(c I + w_tau L_tau^T L_tau + w_y L_y^T L_y) x = rhs`.
    pub fn solve(&self, rhs: &Array2<f64>, c: f64, w_tau: f64, w_y: f64) -> Array2<f64> {
        self.apply_spectral(rhs, |lt, ly| 1.0 / (c + w_tau * lt + w_y * ly))
    }

    /// Largest eigenvalue of `w_tau L_tau^T L_tau + w_y L_y^T L_y`.
    pub fn max_eigenvalue(&self, w_tau: f64, w_y: f64) -> f64 {
        let mt = self.eig_tau.iter().cloned().fold(0.0, f64::max);
        let my = self.eig_y.iter().cloned().fold(0.0, f64::max);
        w_tau * mt + w_y * my
    }
}
