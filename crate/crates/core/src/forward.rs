//! Crank–Nicolson solver for the Dupire equation in log-moneyness,
//!
//! ```text
//! u_tau = a (u_yy - u_y) + b u_y,   u(0, y) = S0 (1 - e^y)^+,
//! u(tau, l_y) = S0,                 u(tau, r_y) = 0,
//! ```
//!
//! together with the discrete adjoint used for exact misfit gradients.
//!
//! Each step from level `i` to `i + 1` uses the averaged coefficients
//! `(a[i][j] + a[i+1][j]) / (4 dy^2)` for diffusion and
//! `(a[i][j] + a[i+1][j] - 2b) / (8 dy)` for convection, and costs one
//! tridiagonal solve.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::mesh::{ObservationOperator, PriceSurface, VarianceSurface};
use crate::tridiag::Tridiagonal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardParams {
    /// Underlying price.
    pub s0: f64,
    /// Drift in the transformed equation (zero for futures).
    pub b: f64,
    /// Risk-free rate used by Black–Scholes analytics.
    pub r: f64,
}

impl ForwardParams {
    pub fn new(s0: f64, b: f64, r: f64) -> Result<Self> {
        if !(s0 > 0.0 && s0.is_finite()) {
            return Err(Error::InvalidParameter { field: "s0", reason: format!("must be > 0, got {s0}") });
        }
        if !b.is_finite() {
            return Err(Error::InvalidParameter { field: "b", reason: "must be finite".into() });
        }
        if !r.is_finite() {
            return Err(Error::InvalidParameter { field: "r", reason: "must be finite".into() });
        }
        Ok(Self { s0, b, r })
    }

    pub fn with_s0(self, s0: f64) -> Self {
        Self { s0, ..self }
    }
}

/// Payoff `S0 (1 - e^y)^+`.
pub fn payoff(s0: f64, y: f64) -> f64 {
    (s0 * (1.0 - y.exp())).max(0.0)
}

/// Implicit (`lhs`) and explicit (`rhs`) operators of one step, restricted to
/// interior nodes.
struct Step {
    lhs: Tridiagonal,
    rhs: Tridiagonal,
}

fn step_operators(a: &Array2<f64>, level: usize, b: f64, dtau: f64, dy: f64) -> Step {
    let n_y = a.ncols();
    let m = n_y - 2;
    let mut lhs = Tridiagonal::zeros(m);
    let mut rhs = Tridiagonal::zeros(m);
    for k in 0..m {
        let j = k + 1;
        let s = a[[level, j]] + a[[level + 1, j]];
        let alpha = dtau * s / (4.0 * dy * dy);
        let beta = dtau * (s - 2.0 * b) / (8.0 * dy);
        lhs.diag[k] = 1.0 + 2.0 * alpha;
        lhs.lower[k] = -(alpha + beta);
        lhs.upper[k] = -(alpha - beta);
        rhs.diag[k] = 1.0 - 2.0 * alpha;
        rhs.lower[k] = alpha + beta;
        rhs.upper[k] = alpha - beta;
    }
    Step { lhs, rhs }
}

/// Marches the Crank–Nicolson scheme from the payoff row to `t_max`.
pub fn solve_forward(a: &VarianceSurface, p: &ForwardParams) -> Result<PriceSurface> {
    let mesh = *a.mesh();
    let (n_tau, n_y) = mesh.shape();
    let av = a.values();
    let mut u = Array2::zeros((n_tau, n_y));
    for j in 0..n_y {
        u[[0, j]] = payoff(p.s0, mesh.y(j));
    }
    for i in 1..n_tau {
        u[[i, 0]] = p.s0;
        u[[i, n_y - 1]] = 0.0;
    }
    let m = n_y - 2;
    let mut work = vec![0.0; m];
    for i in 0..n_tau - 1 {
        let step = step_operators(av, i, p.b, mesh.dtau(), mesh.dy());
        for k in 0..m {
            let j = k + 1;
            work[k] = step.rhs.diag[k] * u[[i, j]]
                + step.rhs.lower[k] * u[[i, j - 1]]
                + step.rhs.upper[k] * u[[i, j + 1]];
        }
        work[0] -= step.lhs.lower[0] * u[[i + 1, 0]];
        work[m - 1] -= step.lhs.upper[m - 1] * u[[i + 1, n_y - 1]];
        if !step.lhs.solve_in_place(&mut work) || work.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem { level: i + 1 });
        }
        for k in 0..m {
            u[[i + 1, k + 1]] = work[k];
        }
    }
    Ok(PriceSurface { mesh, values: u })
}

/// Predicted quote prices `P u(a)`.
pub fn predict_data(a: &VarianceSurface, p: &ForwardParams, op: &ObservationOperator) -> Result<Vec<f64>> {
    if a.mesh() != op.mesh() {
        return Err(Error::ShapeMismatch("observation operator built on a different mesh".into()));
    }
    Ok(op.apply(&solve_forward(a, p)?))
}

/// Pulls a sensitivity `dJ/du` (one entry per node, boundary entries
/// ignored) back to `dJ/da` through the discrete adjoint of the scheme.
///
/// `u` must be the forward solution for `a`.
pub fn adjoint_gradient(
    a: &VarianceSurface,
    p: &ForwardParams,
    u: &PriceSurface,
    du: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mesh = *a.mesh();
    let (n_tau, n_y) = mesh.shape();
    let (dtau, dy) = (mesh.dtau(), mesh.dy());
    let av = a.values();
    let uv = u.values();
    let m = n_y - 2;
    let mut grad = Array2::zeros((n_tau, n_y));
    // lambda for the step ending at the current level.
    let mut lambda = vec![0.0; m];
    let mut next_rhs: Option<Tridiagonal> = None;
    for n in (0..n_tau - 1).rev() {
        let step = step_operators(av, n, p.b, dtau, dy);
        let mut rhs: Vec<f64> = (0..m).map(|k| du[[n + 1, k + 1]]).collect();
        if let Some(explicit) = &next_rhs {
            let pulled = explicit.mul_transpose(&lambda);
            for k in 0..m {
                rhs[k] += pulled[k];
            }
        }
        if !step.lhs.transpose().solve_in_place(&mut rhs) {
            return Err(Error::SingularSystem { level: n + 1 });
        }
        lambda = rhs;
        for k in 0..m {
            let j = k + 1;
            let d2 = uv[[n + 1, j + 1]] - 2.0 * uv[[n + 1, j]] + uv[[n + 1, j - 1]] + uv[[n, j + 1]]
                - 2.0 * uv[[n, j]]
                + uv[[n, j - 1]];
            let d1 = uv[[n + 1, j + 1]] - uv[[n + 1, j - 1]] + uv[[n, j + 1]] - uv[[n, j - 1]];
            let c = d2 / (4.0 * dy * dy) - d1 / (8.0 * dy);
            let ds = lambda[k] * dtau * c;
            grad[[n, j]] += ds;
            grad[[n + 1, j]] += ds;
        }
        next_rhs = Some(step.rhs);
    }
    Ok(grad)
}
