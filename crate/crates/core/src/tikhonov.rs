//! Tikhonov-type calibration of the local-variance surface.
//!
//! Minimizes the merit `phi(a) + R(a)` with
//!
//! ```text
//! phi(a) = alpha0 * sum_k (P u(a) - d)_k^2
//! R(a)   = alpha1 sum (a - a0)^2
//!        + alpha2 / dtau^2 sum (a[i][j] - a[i-1][j])^2
//!        + alpha3 / dy^2   sum (a[i][j] - a[i][j-1])^2
//! ```
//!
//! by projected gradient descent with backtracking. Descent directions are
//! preconditioned with the (constant) Hessian of `R`, which is diagonal in a
//! cosine basis; this keeps the large smoothing weights from dictating the
//! step size.

use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{adjoint_gradient, solve_forward, ForwardParams};
use crate::mesh::{MeshSpec, ObservationOperator, ObservationSet, VarianceSurface, A_FLOOR};
use crate::smoothing::{diff_tau, diff_tau_transpose, diff_y, diff_y_transpose, SeparableLaplacian};

/// Default floor used when extending the scarce-data wings.
pub const WING_FLOOR: f64 = 0.08;
/// Default |y| beyond which completed-data surfaces are held constant.
pub const COMPLETED_CUTOFF: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyWeights {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub a0_prior: f64,
}

impl PenaltyWeights {
    pub fn new(alpha0: f64, alpha1: f64, alpha2: f64, alpha3: f64, a0_prior: f64) -> Result<Self> {
        if !(alpha0 > 0.0 && alpha0.is_finite()) {
            return Err(Error::InvalidParameter { field: "alpha0", reason: format!("must be > 0, got {alpha0}") });
        }
        for (field, v) in [("alpha1", alpha1), ("alpha2", alpha2), ("alpha3", alpha3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter { field, reason: format!("must be >= 0, got {v}") });
            }
        }
        if !(a0_prior >= A_FLOOR && a0_prior.is_finite()) {
            return Err(Error::InvalidParameter {
                field: "a0_prior",
                reason: format!("must be >= {A_FLOOR}, got {a0_prior}"),
            });
        }
        Ok(Self { alpha0, alpha1, alpha2, alpha3, a0_prior })
    }

    pub fn with_alpha0(self, alpha0: f64) -> Self {
        Self { alpha0, ..self }
    }
}

/// Tikhonov penalty `R(a)`.
pub fn penalty(a: &VarianceSurface, w: &PenaltyWeights) -> f64 {
    let m = a.mesh();
    let v = a.values();
    let anchor: f64 = v.iter().map(|x| (x - w.a0_prior).powi(2)).sum();
    let dt: f64 = diff_tau(v).iter().map(|x| x * x).sum();
    let dy: f64 = diff_y(v).iter().map(|x| x * x).sum();
    w.alpha1 * anchor + w.alpha2 / (m.dtau() * m.dtau()) * dt + w.alpha3 / (m.dy() * m.dy()) * dy
}

/// Gradient of [`penalty`] with respect to every nodal value.
pub fn penalty_gradient(a: &VarianceSurface, w: &PenaltyWeights) -> Array2<f64> {
    let m = a.mesh();
    let v = a.values();
    let (n_tau, n_y) = m.shape();
    let wt = 2.0 * w.alpha2 / (m.dtau() * m.dtau());
    let wy = 2.0 * w.alpha3 / (m.dy() * m.dy());
    let mut g = v.mapv(|x| 2.0 * w.alpha1 * (x - w.a0_prior));
    g.scaled_add(wt, &diff_tau_transpose(&diff_tau(v), n_tau));
    g.scaled_add(wy, &diff_y_transpose(&diff_y(v), n_y));
    g
}

/// A model mapping a variance surface to predicted quote values.
pub trait ForwardMap: Sync {
    fn mesh(&self) -> &MeshSpec;

    /// Number of predicted values.
    fn data_len(&self) -> usize;

    fn predict(&self, a: &VarianceSurface) -> Result<Vec<f64>>;

    /// `alpha0 * |predict(a) - data|^2` and its gradient.
    fn misfit_gradient(&self, a: &VarianceSurface, data: &[f64], alpha0: f64) -> Result<(f64, Array2<f64>)>;

    fn misfit(&self, a: &VarianceSurface, data: &[f64], alpha0: f64) -> Result<f64> {
        let pred = self.predict(a)?;
        Ok(alpha0 * pred.iter().zip(data).map(|(p, d)| (p - d).powi(2)).sum::<f64>())
    }
}

/// The Dupire forward problem observed through a bilinear operator.
#[derive(Debug, Clone)]
pub struct DupireMap {
    pub params: ForwardParams,
    pub op: ObservationOperator,
}

impl DupireMap {
    pub fn new(params: ForwardParams, op: ObservationOperator) -> Self {
        Self { params, op }
    }
}

impl ForwardMap for DupireMap {
    fn mesh(&self) -> &MeshSpec {
        self.op.mesh()
    }

    fn data_len(&self) -> usize {
        self.op.len()
    }

    fn predict(&self, a: &VarianceSurface) -> Result<Vec<f64>> {
        crate::forward::predict_data(a, &self.params, &self.op)
    }

    fn misfit_gradient(&self, a: &VarianceSurface, data: &[f64], alpha0: f64) -> Result<(f64, Array2<f64>)> {
        let u = solve_forward(a, &self.params)?;
        let resid: Vec<f64> = self.op.apply(&u).iter().zip(data).map(|(p, d)| p - d).collect();
        let phi = alpha0 * resid.iter().map(|r| r * r).sum::<f64>();
        let scaled: Vec<f64> = resid.iter().map(|r| 2.0 * alpha0 * r).collect();
        let du = self.op.apply_transpose(&scaled);
        Ok((phi, adjoint_gradient(a, &self.params, &u, &du)?))
    }
}

/// Data misfit `alpha0 * |P u(a) - d|^2`.
pub fn misfit(
    a: &VarianceSurface,
    p: &ForwardParams,
    op: &ObservationOperator,
    obs: &ObservationSet,
    alpha0: f64,
) -> Result<f64> {
    DupireMap::new(*p, op.clone()).misfit(a, &obs.prices(), alpha0)
}

/// Gradient of misfit plus penalty by one forward and one adjoint sweep.
pub fn merit_gradient(
    a: &VarianceSurface,
    p: &ForwardParams,
    op: &ObservationOperator,
    obs: &ObservationSet,
    w: &PenaltyWeights,
) -> Result<Array2<f64>> {
    let (_, mut g) = DupireMap::new(*p, op.clone()).misfit_gradient(a, &obs.prices(), w.alpha0)?;
    g += &penalty_gradient(a, w);
    Ok(g)
}

/// How the discrepancy threshold is derived from `alpha0` and the number of
/// quotes `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscrepancyConvention {
    /// `phi <= l / alpha0`.
    #[default]
    PaperLiteral,
    /// `phi <= l`, i.e. a mean squared residual at the assumed noise level.
    Common,
    /// Never stop on the discrepancy principle.
    Disabled,
}

impl DiscrepancyConvention {
    pub fn threshold(self, l: usize, alpha0: f64) -> f64 {
        match self {
            DiscrepancyConvention::PaperLiteral => l as f64 / alpha0,
            DiscrepancyConvention::Common => l as f64,
            DiscrepancyConvention::Disabled => f64::NEG_INFINITY,
        }
    }
}

/// Projection applied to every iterate to control the surface away from the
/// data.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum WingRule {
    #[default]
    None,
    /// On each data maturity row, outside the quoted y-range, interpolate
    /// linearly towards `max(floor, a at the last quoted node)` at the mesh
    /// boundary.
    Scarce { rows: Vec<WingRow>, floor: f64 },
    /// Only the data maturity rows are free; other rows are linear in tau
    /// between them, and values beyond `|y| > cutoff` repeat the value at the
    /// cutoff.
    Completed { maturity_rows: Vec<usize>, j_lo: usize, j_hi: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WingRow {
    pub row: usize,
    pub j_lo: usize,
    pub j_hi: usize,
}

impl WingRule {
    pub fn scarce(obs: &ObservationSet, mesh: &MeshSpec, floor: f64) -> Self {
        let mut rows = Vec::new();
        for tau in obs.maturities() {
            let ys: Vec<f64> =
                obs.quotes().iter().filter(|q| (q.tau - tau).abs() <= 1e-12).map(|q| q.y).collect();
            let y_min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
            let y_max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let pos_lo = (y_min - mesh.l_y()) / mesh.dy();
            let pos_hi = (y_max - mesh.l_y()) / mesh.dy();
            let j_lo = ((pos_lo - 1e-9).ceil().max(0.0) as usize).min(mesh.n_y() - 1);
            let j_hi = ((pos_hi + 1e-9).floor().max(0.0) as usize).min(mesh.n_y() - 1);
            if j_lo <= j_hi {
                rows.push(WingRow { row: mesh.nearest_row(tau), j_lo, j_hi });
            }
        }
        WingRule::Scarce { rows, floor }
    }

    pub fn completed(maturities: &[f64], mesh: &MeshSpec, cutoff: f64) -> Self {
        let mut maturity_rows: Vec<usize> = maturities.iter().map(|&t| mesh.nearest_row(t)).collect();
        maturity_rows.sort_unstable();
        maturity_rows.dedup();
        let j_lo = mesh.nearest_col(-cutoff);
        let j_hi = mesh.nearest_col(cutoff);
        WingRule::Completed { maturity_rows, j_lo, j_hi }
    }

    pub fn apply(&self, a: &mut Array2<f64>, mesh: &MeshSpec) {
        match self {
            WingRule::None => {}
            WingRule::Scarce { rows, floor } => {
                let n_y = mesh.n_y();
                for r in rows {
                    let i = r.row;
                    if r.j_lo > 0 {
                        let anchor = a[[i, r.j_lo]];
                        let edge = anchor.max(*floor);
                        let y_a = mesh.y(r.j_lo);
                        let y_e = mesh.y(0);
                        for j in 0..r.j_lo {
                            let t = (mesh.y(j) - y_e) / (y_a - y_e);
                            a[[i, j]] = edge + t * (anchor - edge);
                        }
                    }
                    if r.j_hi + 1 < n_y {
                        let anchor = a[[i, r.j_hi]];
                        let edge = anchor.max(*floor);
                        let y_a = mesh.y(r.j_hi);
                        let y_e = mesh.y(n_y - 1);
                        for j in r.j_hi + 1..n_y {
                            let t = (mesh.y(j) - y_a) / (y_e - y_a);
                            a[[i, j]] = anchor + t * (edge - anchor);
                        }
                    }
                }
            }
            WingRule::Completed { maturity_rows, j_lo, j_hi } => {
                let (n_tau, n_y) = mesh.shape();
                if let (Some(&first), Some(&last)) = (maturity_rows.first(), maturity_rows.last()) {
                    for i in 0..n_tau {
                        if maturity_rows.binary_search(&i).is_ok() {
                            continue;
                        }
                        if i < first || i > last {
                            let src = if i < first { first } else { last };
                            for j in 0..n_y {
                                a[[i, j]] = a[[src, j]];
                            }
                            continue;
                        }
                        let k = maturity_rows.partition_point(|&r| r < i);
                        let (i0, i1) = (maturity_rows[k - 1], maturity_rows[k]);
                        let t = (i - i0) as f64 / (i1 - i0) as f64;
                        for j in 0..n_y {
                            a[[i, j]] = (1.0 - t) * a[[i0, j]] + t * a[[i1, j]];
                        }
                    }
                }
                for i in 0..n_tau {
                    let (lo, hi) = (a[[i, *j_lo]], a[[i, *j_hi]]);
                    for j in 0..*j_lo {
                        a[[i, j]] = lo;
                    }
                    for j in j_hi + 1..n_y {
                        a[[i, j]] = hi;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TikhonovOptions {
    pub max_iters: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    pub max_halvings: usize,
    /// Largest nodal change attempted by the first trial step.
    pub initial_step: f64,
    /// Stop when the relative merit decrease of an accepted step is below this.
    pub rel_tol: f64,
    pub convention: DiscrepancyConvention,
    pub wing: WingRule,
    /// Precondition descent directions with the penalty Hessian.
    pub precondition: bool,
}

impl Default for TikhonovOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            armijo_c: 1e-4,
            max_halvings: 40,
            initial_step: 1e-2,
            rel_tol: 1e-8,
            convention: DiscrepancyConvention::PaperLiteral,
            wing: WingRule::None,
            precondition: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    DiscrepancyMet,
    MaxIters,
    Stalled,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::DiscrepancyMet => "discrepancy_met",
            StopReason::MaxIters => "max_iters",
            StopReason::Stalled => "stalled",
        })
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub surface: VarianceSurface,
    /// Misfit after each iteration; entry 0 is the starting point.
    pub misfit_history: Vec<f64>,
    pub penalty_history: Vec<f64>,
    /// Accepted step length per iteration (0 for the starting point).
    pub step_history: Vec<f64>,
    pub iterations: usize,
    pub stop_reason: StopReason,
    /// Discrepancy threshold the run compared against.
    pub rho: f64,
}

impl CalibrationResult {
    pub fn final_misfit(&self) -> f64 {
        *self.misfit_history.last().expect("history is never empty")
    }
    pub fn final_penalty(&self) -> f64 {
        *self.penalty_history.last().expect("history is never empty")
    }
}

/// Writes `iteration,misfit,penalty,merit,step` rows.
pub fn write_history_csv<W: Write>(res: &CalibrationResult, mut out: W) -> Result<()> {
    writeln!(out, "iteration,misfit,penalty,merit,step")?;
    for k in 0..res.misfit_history.len() {
        let (m, p) = (res.misfit_history[k], res.penalty_history[k]);
        writeln!(
            out,
            "{k},{},{},{},{}",
            crate::data::fmt17(m),
            crate::data::fmt17(p),
            crate::data::fmt17(m + p),
            crate::data::fmt17(res.step_history[k])
        )?;
    }
    Ok(())
}

struct Preconditioner {
    lap: SeparableLaplacian,
    c: f64,
    w_tau: f64,
    w_y: f64,
}

impl Preconditioner {
    fn new(mesh: &MeshSpec, w: &PenaltyWeights) -> Option<Self> {
        let w_tau = 2.0 * w.alpha2 / (mesh.dtau() * mesh.dtau());
        let w_y = 2.0 * w.alpha3 / (mesh.dy() * mesh.dy());
        if w.alpha1 == 0.0 && w_tau == 0.0 && w_y == 0.0 {
            return None;
        }
        let lap = SeparableLaplacian::new(mesh.n_tau(), mesh.n_y());
        let c = if w.alpha1 > 0.0 { 2.0 * w.alpha1 } else { 1e-4 * lap.max_eigenvalue(w_tau, w_y) };
        Some(Self { lap, c, w_tau, w_y })
    }

    fn apply(&self, g: &Array2<f64>) -> Array2<f64> {
        self.lap.solve(g, self.c, self.w_tau, self.w_y)
    }

    fn hessian(&self, v: &Array2<f64>) -> Array2<f64> {
        let (n_tau, n_y) = v.dim();
        let mut h = v * self.c;
        h.scaled_add(self.w_tau, &diff_tau_transpose(&diff_tau(v), n_tau));
        h.scaled_add(self.w_y, &diff_y_transpose(&diff_y(v), n_y));
        h
    }

    /// Approximately solves `J^T H J x = g` over the free nodes by
    /// preconditioned conjugate gradients and returns `J x`.
    fn apply_constrained(&self, g: &Array2<f64>, wing: &WingRule, a: &Array2<f64>, mesh: &MeshSpec) -> Array2<f64> {
        if matches!(wing, WingRule::None) {
            return self.apply(g);
        }
        let reduced_op = |v: &Array2<f64>| {
            let mut full = v.clone();
            wing.extend_linear(&mut full, a, mesh);
            let mut h = self.hessian(&full);
            wing.fold_gradient(&mut h, a, mesh);
            h
        };
        let precond = |r: &Array2<f64>| {
            let mut z = self.apply(r);
            wing.zero_dependent(&mut z, mesh);
            z
        };
        let mut x = Array2::zeros(g.dim());
        let mut r = g.clone();
        let mut z = precond(&r);
        let mut p = z.clone();
        let mut rz = (&r * &z).sum();
        let rz0 = rz;
        for _ in 0..CG_MAX_ITERS {
            if !(rz > CG_REL_TOL * CG_REL_TOL * rz0) {
                break;
            }
            let hp = reduced_op(&p);
            let php = (&p * &hp).sum();
            if !(php > 0.0) {
                break;
            }
            let step = rz / php;
            x.scaled_add(step, &p);
            r.scaled_add(-step, &hp);
            z = precond(&r);
            let rz_new = (&r * &z).sum();
            p = &z + &(&p * (rz_new / rz));
            rz = rz_new;
        }
        wing.extend_linear(&mut x, a, mesh);
        x
    }
}

const CG_MAX_ITERS: usize = 50;
const CG_REL_TOL: f64 = 1e-3;

impl WingRule {
    /// Replaces `g` by the gradient with respect to the free nodes, given
    /// that the dependent nodes follow [`WingRule::apply`] at `a`. Dependent
    /// entries are set to zero.
    pub fn fold_gradient(&self, g: &mut Array2<f64>, a: &Array2<f64>, mesh: &MeshSpec) {
        match self {
            WingRule::None => {}
            WingRule::Scarce { rows, floor } => {
                let n_y = mesh.n_y();
                for r in rows {
                    let i = r.row;
                    if r.j_lo > 0 {
                        let active = a[[i, r.j_lo]] >= *floor;
                        let (y_a, y_e) = (mesh.y(r.j_lo), mesh.y(0));
                        let mut acc = 0.0;
                        for j in 0..r.j_lo {
                            let d = if active { 1.0 } else { (mesh.y(j) - y_e) / (y_a - y_e) };
                            acc += d * g[[i, j]];
                            g[[i, j]] = 0.0;
                        }
                        g[[i, r.j_lo]] += acc;
                    }
                    if r.j_hi + 1 < n_y {
                        let active = a[[i, r.j_hi]] >= *floor;
                        let (y_a, y_e) = (mesh.y(r.j_hi), mesh.y(n_y - 1));
                        let mut acc = 0.0;
                        for j in r.j_hi + 1..n_y {
                            let d = if active { 1.0 } else { 1.0 - (mesh.y(j) - y_a) / (y_e - y_a) };
                            acc += d * g[[i, j]];
                            g[[i, j]] = 0.0;
                        }
                        g[[i, r.j_hi]] += acc;
                    }
                }
            }
            WingRule::Completed { maturity_rows, j_lo, j_hi } => {
                let (n_tau, n_y) = mesh.shape();
                for i in 0..n_tau {
                    let (mut lo, mut hi) = (0.0, 0.0);
                    for j in 0..*j_lo {
                        lo += g[[i, j]];
                        g[[i, j]] = 0.0;
                    }
                    for j in j_hi + 1..n_y {
                        hi += g[[i, j]];
                        g[[i, j]] = 0.0;
                    }
                    g[[i, *j_lo]] += lo;
                    g[[i, *j_hi]] += hi;
                }
                let (Some(&first), Some(&last)) = (maturity_rows.first(), maturity_rows.last()) else {
                    return;
                };
                for i in 0..n_tau {
                    if maturity_rows.binary_search(&i).is_ok() {
                        continue;
                    }
                    let row: Vec<f64> = (0..n_y).map(|j| g[[i, j]]).collect();
                    let targets: Vec<(usize, f64)> = if i < first {
                        vec![(first, 1.0)]
                    } else if i > last {
                        vec![(last, 1.0)]
                    } else {
                        let k = maturity_rows.partition_point(|&r| r < i);
                        let (i0, i1) = (maturity_rows[k - 1], maturity_rows[k]);
                        let t = (i - i0) as f64 / (i1 - i0) as f64;
                        vec![(i0, 1.0 - t), (i1, t)]
                    };
                    for (src, wgt) in targets {
                        for j in 0..n_y {
                            g[[src, j]] += wgt * row[j];
                        }
                    }
                    for j in 0..n_y {
                        g[[i, j]] = 0.0;
                    }
                }
            }
        }
    }

    /// Sets the dependent entries of `v` from its free entries using the
    /// linearization of [`WingRule::apply`] at `a`.
    pub fn extend_linear(&self, v: &mut Array2<f64>, a: &Array2<f64>, mesh: &MeshSpec) {
        match self {
            WingRule::None => {}
            WingRule::Scarce { rows, floor } => {
                let n_y = mesh.n_y();
                for r in rows {
                    let i = r.row;
                    if r.j_lo > 0 {
                        let active = a[[i, r.j_lo]] >= *floor;
                        let (y_a, y_e) = (mesh.y(r.j_lo), mesh.y(0));
                        let anchor = v[[i, r.j_lo]];
                        for j in 0..r.j_lo {
                            let d = if active { 1.0 } else { (mesh.y(j) - y_e) / (y_a - y_e) };
                            v[[i, j]] = d * anchor;
                        }
                    }
                    if r.j_hi + 1 < n_y {
                        let active = a[[i, r.j_hi]] >= *floor;
                        let (y_a, y_e) = (mesh.y(r.j_hi), mesh.y(n_y - 1));
                        let anchor = v[[i, r.j_hi]];
                        for j in r.j_hi + 1..n_y {
                            let d = if active { 1.0 } else { 1.0 - (mesh.y(j) - y_a) / (y_e - y_a) };
                            v[[i, j]] = d * anchor;
                        }
                    }
                }
            }
            WingRule::Completed { .. } => self.apply(v, mesh),
        }
    }

    /// Zeroes the entries of `d` at dependent nodes.
    pub fn zero_dependent(&self, d: &mut Array2<f64>, mesh: &MeshSpec) {
        match self {
            WingRule::None => {}
            WingRule::Scarce { rows, .. } => {
                for r in rows {
                    for j in (0..r.j_lo).chain(r.j_hi + 1..mesh.n_y()) {
                        d[[r.row, j]] = 0.0;
                    }
                }
            }
            WingRule::Completed { maturity_rows, j_lo, j_hi } => {
                let (n_tau, n_y) = mesh.shape();
                for i in 0..n_tau {
                    let free_row = maturity_rows.binary_search(&i).is_ok();
                    for j in 0..n_y {
                        if !free_row || j < *j_lo || j > *j_hi {
                            d[[i, j]] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn project(values: &mut Array2<f64>, mesh: &MeshSpec, wing: &WingRule) {
    values.mapv_inplace(|v| v.max(A_FLOOR));
    wing.apply(values, mesh);
    values.mapv_inplace(|v| v.max(A_FLOOR));
}

/// Gradient descent on the Tikhonov merit for the Dupire problem.
pub fn calibrate(
    a_init: &VarianceSurface,
    p: &ForwardParams,
    op: &ObservationOperator,
    obs: &ObservationSet,
    w: &PenaltyWeights,
    opts: &TikhonovOptions,
) -> Result<CalibrationResult> {
    calibrate_with_map(a_init, &DupireMap::new(*p, op.clone()), &obs.prices(), w, opts)
}

/// Gradient descent on `misfit + penalty` for an arbitrary forward map.
pub fn calibrate_with_map<M: ForwardMap + ?Sized>(
    a_init: &VarianceSurface,
    map: &M,
    data: &[f64],
    w: &PenaltyWeights,
    opts: &TikhonovOptions,
) -> Result<CalibrationResult> {
    let mesh = *a_init.mesh();
    if &mesh != map.mesh() {
        return Err(Error::ShapeMismatch("initial surface and forward map use different meshes".into()));
    }
    if data.len() != map.data_len() {
        return Err(Error::ShapeMismatch(format!("{} data values for {} predictions", data.len(), map.data_len())));
    }
    let rho = opts.convention.threshold(data.len(), w.alpha0);
    let precond = if opts.precondition { Preconditioner::new(&mesh, w) } else { None };

    let mut values = a_init.values().clone();
    project(&mut values, &mesh, &opts.wing);
    let mut a = VarianceSurface::new(mesh, values)?;
    let (mut phi, mut g_phi) = map.misfit_gradient(&a, data, w.alpha0)?;
    let mut pen = penalty(&a, w);

    let mut res = CalibrationResult {
        surface: a.clone(),
        misfit_history: vec![phi],
        penalty_history: vec![pen],
        step_history: vec![0.0],
        iterations: 0,
        stop_reason: StopReason::MaxIters,
        rho,
    };
    let mut step_size = opts.initial_step;

    for iter in 0..opts.max_iters {
        if phi <= rho {
            res.stop_reason = StopReason::DiscrepancyMet;
            break;
        }
        let merit = phi + pen;
        let grad = &g_phi + &penalty_gradient(&a, w);
        let mut reduced = grad.clone();
        opts.wing.fold_gradient(&mut reduced, a.values(), &mesh);
        let dir = match &precond {
            Some(pc) => -pc.apply_constrained(&reduced, &opts.wing, a.values(), &mesh),
            None => {
                let mut d = -&reduced;
                opts.wing.extend_linear(&mut d, a.values(), &mesh);
                d
            }
        };
        let dir_max = dir.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if !(dir_max > 0.0) || !dir_max.is_finite() {
            res.stop_reason = StopReason::Stalled;
            break;
        }
        let mut t = step_size / dir_max;
        let mut accepted = None;
        for halving in 0..opts.max_halvings {
            let mut trial = a.values() + &(&dir * t);
            project(&mut trial, &mesh, &opts.wing);
            let predicted: f64 = (&grad * &(&trial - a.values())).sum();
            if predicted < 0.0 {
                let cand = VarianceSurface::new(mesh, trial)?;
                if let Ok((phi_c, g_c)) = map.misfit_gradient(&cand, data, w.alpha0) {
                    let pen_c = penalty(&cand, w);
                    if phi_c.is_finite() && phi_c + pen_c <= merit + opts.armijo_c * predicted {
                        accepted = Some((cand, phi_c, g_c, pen_c, halving));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        let Some((cand, phi_c, g_c, pen_c, halving)) = accepted else {
            res.stop_reason = StopReason::Stalled;
            break;
        };
        let decrease = (merit - (phi_c + pen_c)) / merit.abs().max(f64::MIN_POSITIVE);
        a = cand;
        phi = phi_c;
        g_phi = g_c;
        pen = pen_c;
        res.iterations = iter + 1;
        res.misfit_history.push(phi);
        res.penalty_history.push(pen);
        res.step_history.push(t * dir_max);
        step_size = if halving == 0 { 2.0 * t * dir_max } else { t * dir_max };
        if decrease < opts.rel_tol {
            res.stop_reason = if phi <= rho { StopReason::DiscrepancyMet } else { StopReason::Stalled };
            break;
        }
        if iter + 1 == opts.max_iters && phi <= rho {
            res.stop_reason = StopReason::DiscrepancyMet;
        }
    }
    res.surface = a;
    Ok(res)
}

/// Outcome of an L-curve sweep.
#[derive(Debug, Clone)]
pub struct LcurveSelection {
    pub alpha0: f64,
    /// Corner curvature at the selected point.
    pub curvature: f64,
    /// Set when no point bends by more than [`LOW_CURVATURE`].
    pub low_curvature: bool,
    /// `(alpha0, residual |Pu - d|^2, penalty)` for every successful run.
    pub points: Vec<(f64, f64, f64)>,
}

/// Curvature in log-log units below which the sweep is reported as having
/// no clear corner.
pub const LOW_CURVATURE: f64 = 0.1;

/// Signed curvature of `(x(t), y(t))` at interior points, positive where the
/// curve turns like the corner of an L-curve traced with increasing `t`.
pub fn corner_curvature(t: &[f64], x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut out = vec![f64::NEG_INFINITY; n];
    for k in 1..n.saturating_sub(1) {
        let h1 = t[k] - t[k - 1];
        let h2 = t[k + 1] - t[k];
        if !(h1 > 0.0 && h2 > 0.0) {
            out[k] = 0.0;
            continue;
        }
        let d1 = |f: &[f64]| {
            -h2 / (h1 * (h1 + h2)) * f[k - 1] + (h2 - h1) / (h1 * h2) * f[k] + h1 / (h2 * (h1 + h2)) * f[k + 1]
        };
        let d2 = |f: &[f64]| {
            2.0 * (f[k - 1] / (h1 * (h1 + h2)) - f[k] / (h1 * h2) + f[k + 1] / (h2 * (h1 + h2)))
        };
        let (xp, yp, xpp, ypp) = (d1(x), d1(y), d2(x), d2(y));
        let speed = (xp * xp + yp * yp).powf(1.5);
        out[k] = if speed > 0.0 { (yp * xpp - xp * ypp) / speed } else { 0.0 };
    }
    out
}

/// Picks `alpha0` at the corner of the `(log residual, log penalty)` curve.
pub fn lcurve_select<M: ForwardMap + ?Sized>(
    candidates: &[f64],
    a_init: &VarianceSurface,
    map: &M,
    data: &[f64],
    w: &PenaltyWeights,
    opts: &TikhonovOptions,
) -> Result<LcurveSelection> {
    if candidates.len() < 4 {
        return Err(Error::TooFewRuns(candidates.len()));
    }
    if candidates.windows(2).any(|p| !(p[0] <= p[1])) {
        return Err(Error::InvalidParameter { field: "candidates", reason: "must be sorted ascending".into() });
    }
    if candidates.iter().all(|&c| c == candidates[0]) {
        return Ok(LcurveSelection { alpha0: candidates[0], curvature: 0.0, low_curvature: true, points: vec![] });
    }
    let runs: Vec<Option<(f64, f64, f64)>> = candidates
        .par_iter()
        .map(|&alpha0| {
            let wk = w.with_alpha0(alpha0);
            let res = calibrate_with_map(a_init, map, data, &wk, opts).ok()?;
            let resid = res.final_misfit() / alpha0;
            let pen = res.final_penalty();
            (resid > 0.0 && pen > 0.0 && resid.is_finite() && pen.is_finite()).then_some((alpha0, resid, pen))
        })
        .collect();
    let points: Vec<(f64, f64, f64)> = runs.into_iter().flatten().collect();
    if points.len() < 4 {
        return Err(Error::TooFewRuns(points.len()));
    }
    let t: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let x: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.2.ln()).collect();
    let kappa = corner_curvature(&t, &x, &y);
    let mut best = 1;
    for k in 1..points.len() - 1 {
        if kappa[k] >= kappa[best] {
            best = k;
        }
    }
    Ok(LcurveSelection {
        alpha0: points[best].0,
        curvature: kappa[best],
        low_curvature: kappa[best] < LOW_CURVATURE,
        points,
    })
}
