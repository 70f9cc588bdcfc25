//! Thomas algorithm for tridiagonal systems.

/// Tridiagonal matrix stored by diagonals. `lower[0]` and `upper[n - 1]` are
/// ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Pivot magnitude below which a system is treated as singular, relative to
/// the largest diagonal entry.
const PIVOT_TOL: f64 = 1e-14;

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self { lower: vec![0.0; n], diag: vec![0.0; n], upper: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `y = A x`.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|j| {
                let mut v = self.diag[j] * x[j];
                if j > 0 {
                    v += self.lower[j] * x[j - 1];
                }
                if j + 1 < n {
                    v += self.upper[j] * x[j + 1];
                }
                v
            })
            .collect()
    }

    /// `y = A^T x`.
    pub fn mul_transpose(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|j| {
                let mut v = self.diag[j] * x[j];
                if j > 0 {
                    v += self.upper[j - 1] * x[j - 1];
                }
                if j + 1 < n {
                    v += self.lower[j + 1] * x[j + 1];
                }
                v
            })
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let n = self.len();
        let mut t = Self::zeros(n);
        t.diag.clone_from(&self.diag);
        for j in 1..n {
            t.lower[j] = self.upper[j - 1];
            t.upper[j - 1] = self.lower[j];
        }
        t
    }

    /// Solves `A x = rhs` in place. Returns `false` when a pivot vanishes.
    pub fn solve_in_place(&self, rhs: &mut [f64]) -> bool {
        let n = self.len();
        debug_assert_eq!(rhs.len(), n);
        if n == 0 {
            return true;
        }
        let scale = self.diag.iter().fold(0.0_f64, |m, d| m.max(d.abs())).max(f64::MIN_POSITIVE);
        let mut c = vec![0.0; n];
        let mut pivot = self.diag[0];
        if !(pivot.abs() > PIVOT_TOL * scale) {
            return false;
        }
        c[0] = self.upper[0] / pivot;
        rhs[0] /= pivot;
        for j in 1..n {
            pivot = self.diag[j] - self.lower[j] * c[j - 1];
            if !(pivot.abs() > PIVOT_TOL * scale) {
                return false;
            }
            c[j] = if j + 1 < n { self.upper[j] / pivot } else { 0.0 };
            rhs[j] = (rhs[j] - self.lower[j] * rhs[j - 1]) / pivot;
        }
        for j in (0..n - 1).rev() {
            rhs[j] -= c[j] * rhs[j + 1];
        }
        true
    }
}
