//! Iterative ensemble Kalman inversion of the variance surface.
//!
//! Each member is an augmented vector `z = (a, P u(a))`. The analysis treats
//! three observation blocks at once:
//!
//! ```text
//! H z      ~ N(d, gamma I)            (predicted data vs. quotes)
//! L_tau a  ~ N(L_tau a0, d_tau I)     (tau differences)
//! L_y a    ~ N(L_y a0, d_y I)         (y differences)
//! ```
//!
//! With `G = [H; L_tau; L_y]` and `R = diag(gamma I, d_tau I, d_y I)` the
//! update of member `j` is `D G^T (G D G^T + R)^{-1} e_j`, where `e_j` is the
//! stacked innovation with perturbed observations. This equals applying the
//! three gains in sequence (see [`sequential_gain_posterior`]).
//!
//! `D` is the sample covariance of the ensemble plus `eps I`. The innovation
//! system is never formed: it is inverted by the Woodbury identity around
//! `eps G G^T + R`, whose difference block is diagonal in a cosine basis.
//! Only the variance block is updated; predictions are refreshed by forward
//! solves.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, GainStage, Result};
use crate::mesh::{MeshSpec, VarianceSurface, A_FLOOR};
use crate::smoothing::{diff_tau, diff_tau_transpose, diff_y, diff_y_transpose, SeparableLaplacian};
use crate::tikhonov::{ForwardMap, PenaltyWeights, StopReason};

/// Relative size of the diagonal added to the sample covariance.
pub const COVARIANCE_JITTER: f64 = 1e-8;
/// Consecutive non-decreasing residuals after which [`run_enkf`] stops.
const STALL_LIMIT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnkfPriors {
    /// Noise variance of each quote. Must be finite.
    pub gamma_scale: f64,
    /// Variance of each tau-difference pseudo-observation; `inf` disables it.
    pub d_tau_scale: f64,
    /// Variance of each y-difference pseudo-observation; `inf` disables it.
    pub d_y_scale: f64,
    pub a0_prior: f64,
    pub init_std: f64,
    pub init_corr_len: f64,
}

impl EnkfPriors {
    pub fn new(
        gamma_scale: f64,
        d_tau_scale: f64,
        d_y_scale: f64,
        a0_prior: f64,
        init_std: f64,
        init_corr_len: f64,
    ) -> Result<Self> {
        if !(gamma_scale > 0.0 && gamma_scale.is_finite()) {
            return Err(Error::InvalidParameter { field: "gamma_scale", reason: format!("must be finite and > 0, got {gamma_scale}") });
        }
        for (field, v) in [("d_tau_scale", d_tau_scale), ("d_y_scale", d_y_scale)] {
            if !(v > 0.0) {
                return Err(Error::InvalidParameter { field, reason: format!("must be > 0, got {v}") });
            }
        }
        if !(a0_prior >= A_FLOOR && a0_prior.is_finite()) {
            return Err(Error::InvalidParameter { field: "a0_prior", reason: format!("must be >= {A_FLOOR}, got {a0_prior}") });
        }
        if !(init_std >= 0.0 && init_std.is_finite()) {
            return Err(Error::InvalidParameter { field: "init_std", reason: format!("must be >= 0, got {init_std}") });
        }
        if !(init_corr_len > 0.0 && init_corr_len.is_finite()) {
            return Err(Error::InvalidParameter { field: "init_corr_len", reason: format!("must be > 0, got {init_corr_len}") });
        }
        Ok(Self { gamma_scale, d_tau_scale, d_y_scale, a0_prior, init_std, init_corr_len })
    }

    /// `gamma = 1 / alpha0`, `d_tau = dtau^2 / alpha2`, `d_y = dy^2 / alpha3`.
    pub fn from_weights(w: &PenaltyWeights, mesh: &MeshSpec, init_std: f64, init_corr_len: f64) -> Result<Self> {
        let inv = |num: f64, alpha: f64| if alpha > 0.0 { num / alpha } else { f64::INFINITY };
        Self::new(
            1.0 / w.alpha0,
            inv(mesh.dtau() * mesh.dtau(), w.alpha2),
            inv(mesh.dy() * mesh.dy(), w.alpha3),
            w.a0_prior,
            init_std,
            init_corr_len,
        )
    }

    fn tau_active(&self) -> bool {
        self.d_tau_scale.is_finite()
    }

    fn y_active(&self) -> bool {
        self.d_y_scale.is_finite()
    }
}

/// Ensemble of augmented states, one column per member.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    mesh: MeshSpec,
    l: usize,
    members: DMatrix<f64>,
    pub iteration: usize,
}

impl EnsembleState {
    /// `members` has `M + l` rows (variance block first) and `J >= 2`
    /// columns. Variance blocks are clamped at the floor.
    pub fn from_members(mesh: MeshSpec, l: usize, mut members: DMatrix<f64>) -> Result<Self> {
        let m = mesh.node_count();
        if members.nrows() != m + l {
            return Err(Error::ShapeMismatch(format!("members have {} rows, expected {}", members.nrows(), m + l)));
        }
        if members.ncols() < 2 {
            return Err(Error::InvalidParameter { field: "ensemble_size", reason: format!("need J >= 2, got {}", members.ncols()) });
        }
        members.rows_mut(0, m).apply(|v| *v = v.max(A_FLOOR));
        Ok(Self { mesh, l, members, iteration: 0 })
    }

    pub fn mesh(&self) -> &MeshSpec {
        &self.mesh
    }
    pub fn ensemble_size(&self) -> usize {
        self.members.ncols()
    }
    pub fn variance_len(&self) -> usize {
        self.mesh.node_count()
    }
    pub fn data_len(&self) -> usize {
        self.l
    }
    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn variance(&self, j: usize) -> VarianceSurface {
        let col = self.members.column(j);
        let vals = ndarray::Array2::from_shape_fn(self.mesh.shape(), |(i, k)| col[self.mesh.flat(i, k)]);
        VarianceSurface::new(self.mesh, vals).expect("members are clamped")
    }

    pub fn predicted(&self, j: usize) -> Vec<f64> {
        self.members.column(j).rows(self.variance_len(), self.l).iter().cloned().collect()
    }

    pub fn mean_variance(&self) -> VarianceSurface {
        let mean = self.members.column_mean();
        let vals = ndarray::Array2::from_shape_fn(self.mesh.shape(), |(i, k)| mean[self.mesh.flat(i, k)]);
        VarianceSurface::new(self.mesh, vals).expect("mean of clamped members")
    }

    /// Sample covariance `A A^T` with anomalies scaled by `1 / sqrt(J)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let a = self.anomalies();
        &a * a.transpose()
    }

    fn anomalies(&self) -> DMatrix<f64> {
        let mean = self.members.column_mean();
        let scale = 1.0 / (self.ensemble_size() as f64).sqrt();
        let mut a = self.members.clone();
        for mut c in a.column_iter_mut() {
            c -= &mean;
            c *= scale;
        }
        a
    }
}

/// Squared-exponential correlation square root on a 1-D coordinate set.
fn correlation_sqrt(x: &[f64], len: f64) -> DMatrix<f64> {
    let n = x.len();
    let c = DMatrix::from_fn(n, n, |i, j| (-(x[i] - x[j]).powi(2) / (2.0 * len * len)).exp());
    let eig = SymmetricEigen::new(c);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `J` members `a0 + init_std * F` with `F` a Gaussian field of unit
/// marginal variance and separable squared-exponential correlation,
/// followed by a prediction step.
pub fn init_ensemble<M: ForwardMap + ?Sized>(map: &M, priors: &EnkfPriors, j: usize, seed: u64) -> Result<EnsembleState> {
    let mesh = *map.mesh();
    let (n_tau, n_y) = mesh.shape();
    let m = mesh.node_count();
    let l = map.data_len();
    if j < 2 {
        return Err(Error::InvalidParameter { field: "ensemble_size", reason: format!("need J >= 2, got {j}") });
    }
    let mut members = DMatrix::zeros(m + l, j);
    members.rows_mut(0, m).fill(priors.a0_prior);
    if priors.init_std > 0.0 {
        let st = correlation_sqrt(&mesh.taus(), priors.init_corr_len);
        let sy = correlation_sqrt(&mesh.ys(), priors.init_corr_len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in 0..j {
            let z = DMatrix::from_fn(n_tau, n_y, |_, _| StandardNormal.sample(&mut rng));
            let field = &st * z * &sy;
            for i in 0..n_tau {
                for k in 0..n_y {
                    members[(mesh.flat(i, k), c)] = priors.a0_prior + priors.init_std * field[(i, k)];
                }
            }
        }
    }
    let ens = EnsembleState::from_members(mesh, l, members)?;
    predict(&ens, map)
}

/// Recomputes every member's predicted-data block from its variance block.
pub fn predict<M: ForwardMap + ?Sized>(ens: &EnsembleState, map: &M) -> Result<EnsembleState> {
    if map.mesh() != &ens.mesh || map.data_len() != ens.l {
        return Err(Error::ShapeMismatch("forward map does not match the ensemble".into()));
    }
    let preds: Vec<Vec<f64>> =
        (0..ens.ensemble_size()).into_par_iter().map(|j| map.predict(&ens.variance(j))).collect::<Result<_>>()?;
    let mut out = ens.clone();
    let m = ens.variance_len();
    for (j, p) in preds.iter().enumerate() {
        for (k, v) in p.iter().enumerate() {
            out.members[(m + k, j)] = *v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalysisOptions {
    pub seed: u64,
    /// Draw perturbed observations; `false` gives the deterministic update.
    pub perturb: bool,
}

/// Stacked observation operator `G` and the structured inverse of
/// `eps G G^T + R`.
struct Observation<'a> {
    mesh: &'a MeshSpec,
    priors: &'a EnkfPriors,
    l: usize,
    eps: f64,
    lap: SeparableLaplacian,
}

impl<'a> Observation<'a> {
    fn n_tau_rows(&self) -> usize {
        if self.priors.tau_active() {
            (self.mesh.n_tau() - 1) * self.mesh.n_y()
        } else {
            0
        }
    }
    fn n_y_rows(&self) -> usize {
        if self.priors.y_active() {
            self.mesh.n_tau() * (self.mesh.n_y() - 1)
        } else {
            0
        }
    }
    fn len(&self) -> usize {
        self.l + self.n_tau_rows() + self.n_y_rows()
    }

    fn field(&self, flat: &[f64]) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_vec(self.mesh.shape(), flat.to_vec()).expect("variance block length")
    }

    /// `L a` for the active difference blocks.
    fn apply_l(&self, a: &[f64], out: &mut Vec<f64>) {
        let f = self.field(a);
        if self.priors.tau_active() {
            out.extend(diff_tau(&f).iter());
        }
        if self.priors.y_active() {
            out.extend(diff_y(&f).iter());
        }
    }

    /// `L^T v` as a flat variance block.
    fn apply_lt(&self, v: &[f64]) -> ndarray::Array2<f64> {
        let (n_tau, n_y) = self.mesh.shape();
        let mut out = ndarray::Array2::zeros((n_tau, n_y));
        let (nt, ny) = (self.n_tau_rows(), self.n_y_rows());
        if nt > 0 {
            let r = ndarray::Array2::from_shape_vec((n_tau - 1, n_y), v[..nt].to_vec()).expect("shape");
            out += &diff_tau_transpose(&r, n_tau);
        }
        if ny > 0 {
            let r = ndarray::Array2::from_shape_vec((n_tau, n_y - 1), v[nt..nt + ny].to_vec()).expect("shape");
            out += &diff_y_transpose(&r, n_y);
        }
        out
    }

    fn apply_g(&self, z: &[f64]) -> Vec<f64> {
        let m = self.mesh.node_count();
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&z[m..m + self.l]);
        self.apply_l(&z[..m], &mut out);
        out
    }

    fn r_l_inv(&self, v: &mut [f64]) {
        let nt = self.n_tau_rows();
        for (k, x) in v.iter_mut().enumerate() {
            *x /= if k < nt { self.priors.d_tau_scale } else { self.priors.d_y_scale };
        }
    }

    /// `(eps G G^T + R)^{-1} v`.
    ///
    /// The data block is diagonal. For the difference block
    /// `(R_L + eps L L^T)^{-1} = R_L^{-1} - R_L^{-1} L (I/eps + L^T R_L^{-1} L)^{-1} L^T R_L^{-1}`,
    /// and the inner matrix is a separable Laplacian.
    fn apply_s0_inv(&self, v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = v[..self.l].iter().map(|x| x / (self.eps + self.priors.gamma_scale)).collect();
        if self.len() == self.l {
            return out;
        }
        let mut u = v[self.l..].to_vec();
        self.r_l_inv(&mut u);
        let t = self.apply_lt(&u);
        let w_tau = if self.priors.tau_active() { 1.0 / self.priors.d_tau_scale } else { 0.0 };
        let w_y = if self.priors.y_active() { 1.0 / self.priors.d_y_scale } else { 0.0 };
        let s = self.lap.solve(&t, 1.0 / self.eps, w_tau, w_y);
        let mut ls = Vec::with_capacity(u.len());
        self.apply_l(s.as_slice().expect("standard layout"), &mut ls);
        self.r_l_inv(&mut ls);
        out.extend(u.iter().zip(&ls).map(|(a, b)| a - b));
        out
    }
}

/// One stochastic (or deterministic) analysis step against data `d`.
///
/// Predicted blocks must be current. Variance blocks are updated and
/// clamped; predicted blocks are left stale until the next [`predict`].
pub fn analysis(ens: &EnsembleState, d: &[f64], priors: &EnkfPriors, opts: AnalysisOptions) -> Result<EnsembleState> {
    let (l, m, jn) = (ens.l, ens.variance_len(), ens.ensemble_size());
    if d.len() != l {
        return Err(Error::ShapeMismatch(format!("{} data values for {l} predicted", d.len())));
    }
    let a = ens.anomalies();
    let trace: f64 = a.iter().map(|v| v * v).sum();
    let mut out = ens.clone();
    out.iteration += 1;
    if !(trace > 0.0) {
        return Ok(out);
    }
    let obs = Observation {
        mesh: &ens.mesh,
        priors,
        l,
        eps: COVARIANCE_JITTER * trace / (m + l) as f64,
        lap: SeparableLaplacian::new(ens.mesh.n_tau(), ens.mesh.n_y()),
    };
    let k = obs.len();

    // B = G A and C = S0^{-1} B, column by column.
    let cols: Vec<(Vec<f64>, Vec<f64>)> = (0..jn)
        .into_par_iter()
        .map(|c| {
            let b = obs.apply_g(a.column(c).as_slice());
            let s = obs.apply_s0_inv(&b);
            (b, s)
        })
        .collect();
    let b = DMatrix::from_fn(k, jn, |r, c| cols[c].0[r]);
    let cm = DMatrix::from_fn(k, jn, |r, c| cols[c].1[r]);
    let inner = DMatrix::identity(jn, jn) + b.transpose() * &cm;
    let chol = inner.cholesky().ok_or(Error::SingularGain(GainStage::Joint))?;

    // Innovations with perturbed observations.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(ens.iteration as u64);
    let (nt, ny) = (obs.n_tau_rows(), obs.n_y_rows());
    let noise = |rng: &mut ChaCha8Rng, var: f64| -> f64 {
        if opts.perturb {
            let z: f64 = StandardNormal.sample(rng);
            var.sqrt() * z
        } else {
            0.0
        }
    };
    let mut innovations = Vec::with_capacity(jn);
    for c in 0..jn {
        let z = ens.members.column(c);
        let mut e = Vec::with_capacity(k);
        for (i, di) in d.iter().enumerate() {
            e.push(di + noise(&mut rng, priors.gamma_scale) - z[m + i]);
        }
        let mut la = Vec::with_capacity(nt + ny);
        obs.apply_l(z.rows(0, m).as_slice(), &mut la);
        for (i, v) in la.iter().enumerate() {
            let var = if i < nt { priors.d_tau_scale } else { priors.d_y_scale };
            e.push(noise(&mut rng, var) - v);
        }
        innovations.push(e);
    }

    let a_var = a.rows(0, m).into_owned();
    let increments: Vec<DVector<f64>> = innovations
        .par_iter()
        .map(|e| {
            let ev = DVector::from_column_slice(e);
            let s = DVector::from_vec(obs.apply_s0_inv(e));
            let w = chol.solve(&(cm.transpose() * &ev));
            let y = s - &cm * w;
            let bty = b.transpose() * &y;
            let mut dv = &a_var * bty;
            let lt = obs.apply_lt(&y.as_slice()[l..]);
            for (x, g) in dv.iter_mut().zip(lt.iter()) {
                *x += obs.eps * g;
            }
            dv
        })
        .collect();
    for (c, dv) in increments.iter().enumerate() {
        for r in 0..m {
            out.members[(r, c)] = (out.members[(r, c)] + dv[r]).max(A_FLOOR);
        }
    }
    Ok(out)
}

fn stage_name(k: usize) -> GainStage {
    match k {
        0 => GainStage::W3,
        1 => GainStage::W2,
        2 => GainStage::W1,
        _ => GainStage::Joint,
    }
}

/// Posterior covariance by applying the gains of each observation block
/// `(G_k, diag R_k)` in turn; for blocks `[H, L_tau, L_y]` this is
/// `(I - W1 L_y)(I - W2 L_tau)(I - W3 H) D`. Dense; for small problems.
pub fn sequential_gain_posterior(d: &DMatrix<f64>, blocks: &[(DMatrix<f64>, DVector<f64>)]) -> Result<DMatrix<f64>> {
    let n = d.nrows();
    let mut p = d.clone();
    for (k, (g, r)) in blocks.iter().enumerate() {
        let s = g * &p * g.transpose() + DMatrix::from_diagonal(r);
        let chol = s.cholesky().ok_or(Error::SingularGain(stage_name(k)))?;
        // W = P G^T S^{-1}, computed as (S^{-1} G P)^T.
        let w = chol.solve(&(g * &p)).transpose();
        p = (DMatrix::identity(n, n) - w * g) * p;
    }
    Ok(p)
}

/// `(D^{-1} + sum_k G_k^T R_k^{-1} G_k)^{-1}` by dense factorization.
pub fn direct_posterior(d: &DMatrix<f64>, blocks: &[(DMatrix<f64>, DVector<f64>)]) -> Result<DMatrix<f64>> {
    let mut info = d.clone().cholesky().ok_or(Error::SingularGain(GainStage::Joint))?.inverse();
    for (g, r) in blocks {
        info += g.transpose() * DMatrix::from_diagonal(&r.map(|v| 1.0 / v)) * g;
    }
    Ok(info.cholesky().ok_or(Error::SingularGain(GainStage::Joint))?.inverse())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnkfOptions {
    pub ensemble_size: usize,
    pub max_iters: usize,
    /// Stop once `|P u(mean) - d| / |d|` is at most this.
    pub residual_tol: f64,
    pub seed: u64,
    pub perturb: bool,
}

impl Default for EnkfOptions {
    fn default() -> Self {
        Self { ensemble_size: 100, max_iters: 50, residual_tol: 0.0, seed: 0, perturb: true }
    }
}

#[derive(Debug, Clone)]
pub struct EnkfResult {
    /// Ensemble-mean variance after the last analysis.
    pub surface: VarianceSurface,
    /// Normalized data residual of the mean; entry 0 is the initial ensemble.
    pub residual_history: Vec<f64>,
    /// `alpha0`-weighted misfit of the mean, aligned with `residual_history`.
    pub misfit_history: Vec<f64>,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub ensemble: EnsembleState,
}

fn normalized_residual(pred: &[f64], d: &[f64]) -> f64 {
    let num: f64 = pred.iter().zip(d).map(|(p, v)| (p - v).powi(2)).sum();
    let den: f64 = d.iter().map(|v| v * v).sum();
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

/// Artificial-time iteration of predict and analysis steps.
pub fn run_enkf<M: ForwardMap + ?Sized>(map: &M, d: &[f64], priors: &EnkfPriors, opts: &EnkfOptions) -> Result<EnkfResult> {
    if d.len() != map.data_len() {
        return Err(Error::ShapeMismatch(format!("{} data values for {} predictions", d.len(), map.data_len())));
    }
    let alpha0 = 1.0 / priors.gamma_scale;
    let mut ens = init_ensemble(map, priors, opts.ensemble_size, opts.seed)?;
    let mut mean = ens.mean_variance();
    let pred = map.predict(&mean)?;
    let mut res = EnkfResult {
        surface: mean.clone(),
        residual_history: vec![normalized_residual(&pred, d)],
        misfit_history: vec![alpha0 * pred.iter().zip(d).map(|(p, v)| (p - v).powi(2)).sum::<f64>()],
        iterations: 0,
        stop_reason: StopReason::MaxIters,
        ensemble: ens.clone(),
    };
    let mut best = res.residual_history[0];
    let mut stalls = 0;
    let aopts = AnalysisOptions { seed: opts.seed, perturb: opts.perturb };
    for it in 0..opts.max_iters {
        ens = predict(&analysis(&ens, d, priors, aopts)?, map)?;
        mean = ens.mean_variance();
        let pred = map.predict(&mean)?;
        let r = normalized_residual(&pred, d);
        res.residual_history.push(r);
        res.misfit_history.push(alpha0 * pred.iter().zip(d).map(|(p, v)| (p - v).powi(2)).sum::<f64>());
        res.iterations = it + 1;
        log::debug!("enkf iteration {}: residual {r}", it + 1);
        if r <= opts.residual_tol {
            res.stop_reason = StopReason::DiscrepancyMet;
            break;
        }
        if r < best {
            best = r;
            stalls = 0;
        } else {
            stalls += 1;
            if stalls >= STALL_LIMIT {
                res.stop_reason = StopReason::Stalled;
                break;
            }
        }
    }
    res.surface = mean;
    res.ensemble = ens;
    Ok(res)
}

/// Writes `iteration,residual,misfit` rows.
pub fn write_enkf_history_csv<W: Write>(res: &EnkfResult, mut out: W) -> Result<()> {
    use crate::data::fmt17;
    writeln!(out, "iteration,residual,misfit")?;
    for (k, (r, m)) in res.residual_history.iter().zip(&res.misfit_history).enumerate() {
        writeln!(out, "{k},{},{}", fmt17(*r), fmt17(*m))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::ForwardParams;
    use crate::mesh::{build_mesh, build_observation_operator, ObservationSet, Quote};
    use crate::tikhonov::DupireMap;
    use ndarray::Array2;

    /// `predict(a) = H vec(a)` for a fixed matrix.
    struct LinearMap {
        mesh: MeshSpec,
        h: DMatrix<f64>,
    }

    impl ForwardMap for LinearMap {
        fn mesh(&self) -> &MeshSpec {
            &self.mesh
        }
        fn data_len(&self) -> usize {
            self.h.nrows()
        }
        fn predict(&self, a: &VarianceSurface) -> Result<Vec<f64>> {
            let x = DVector::from_iterator(self.mesh.node_count(), a.values().iter().cloned());
            Ok((&self.h * x).iter().cloned().collect())
        }
        fn misfit_gradient(&self, _: &VarianceSurface, _: &[f64], _: f64) -> Result<(f64, Array2<f64>)> {
            unimplemented!("not needed by the ensemble method")
        }
    }

    fn difference_matrices(mesh: &MeshSpec, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let (n_tau, n_y) = mesh.shape();
        let lt = DMatrix::from_fn((n_tau - 1) * n_y, n, |r, c| {
            let (i, j) = (r / n_y, r % n_y);
            if c == mesh.flat(i + 1, j) {
                1.0
            } else if c == mesh.flat(i, j) {
                -1.0
            } else {
                0.0
            }
        });
        let ly = DMatrix::from_fn(n_tau * (n_y - 1), n, |r, c| {
            let (i, j) = (r / (n_y - 1), r % (n_y - 1));
            if c == mesh.flat(i, j + 1) {
                1.0
            } else if c == mesh.flat(i, j) {
                -1.0
            } else {
                0.0
            }
        });
        (lt, ly)
    }

    fn blocks(mesh: &MeshSpec, l: usize, p: &EnkfPriors) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        let m = mesh.node_count();
        let n = m + l;
        let h = DMatrix::from_fn(l, n, |r, c| if c == m + r { 1.0 } else { 0.0 });
        let (lt, ly) = difference_matrices(mesh, m);
        let pad = |x: DMatrix<f64>| {
            let mut full = DMatrix::zeros(x.nrows(), n);
            full.columns_mut(0, m).copy_from(&x);
            full
        };
        let (nt, ny) = (lt.nrows(), ly.nrows());
        vec![
            (h, DVector::from_element(l, p.gamma_scale)),
            (pad(lt), DVector::from_element(nt, p.d_tau_scale)),
            (pad(ly), DVector::from_element(ny, p.d_y_scale)),
        ]
    }

    fn linear_setup(seed: u64) -> (LinearMap, EnkfPriors, Vec<f64>) {
        let mesh = build_mesh(0.5, 0.5, -1.0, 1.0, 1.5).unwrap();
        let m = mesh.node_count();
        let h = DMatrix::from_fn(4, m, |r, c| (((r + 2) * (c + 1)) as f64 * 0.61).cos() * 0.3);
        let map = LinearMap { mesh, h };
        let priors = EnkfPriors::new(1e-3, 0.05, 0.02, 0.5, 0.05, 0.6).unwrap();
        let d = (0..4).map(|k| 0.1 * k as f64 + 0.05 * seed as f64).collect();
        (map, priors, d)
    }

    #[test]
    fn low_rank_update_matches_dense_formula() {
        let (map, priors, d) = linear_setup(1);
        let ens = init_ensemble(&map, &priors, 40, 3).unwrap();
        let (m, l) = (ens.variance_len(), ens.data_len());
        let n = m + l;
        let after = analysis(&ens, &d, &priors, AnalysisOptions { seed: 0, perturb: false }).unwrap();

        let cov = ens.covariance();
        let eps = COVARIANCE_JITTER * cov.trace() / n as f64;
        let dreg = &cov + DMatrix::identity(n, n) * eps;
        let bl = blocks(ens.mesh(), l, &priors);
        let post = sequential_gain_posterior(&dreg, &bl).unwrap();
        for c in 0..ens.ensemble_size() {
            let z = ens.members().column(c).into_owned();
            let mut rhs = DVector::zeros(n);
            let targets = [DVector::from_vec(d.clone()), DVector::zeros(bl[1].0.nrows()), DVector::zeros(bl[2].0.nrows())];
            for ((g, r), t) in bl.iter().zip(&targets) {
                rhs += g.transpose() * DVector::from_iterator(r.len(), (t - g * &z).iter().zip(r.iter()).map(|(e, v)| e / v));
            }
            let expect = &z + &post * rhs;
            for r in 0..m {
                let got = after.members()[(r, c)];
                assert!((got - expect[r].max(A_FLOOR)).abs() <= 1e-8 * (1.0 + expect[r].abs()), "{got} vs {}", expect[r]);
            }
        }
    }

    #[test]
    fn sequential_gains_equal_direct_inverse() {
        let mesh = build_mesh(0.5, 0.5, -1.0, 1.0, 1.0).unwrap();
        let priors = EnkfPriors::new(0.3, 0.7, 1.3, 0.1, 0.0, 1.0).unwrap();
        let l = 5;
        let n = mesh.node_count() + l;
        let q = DMatrix::from_fn(n, n, |r, c| ((r * 7 + c * 3) as f64 * 0.29).sin());
        let d = &q * q.transpose() + DMatrix::identity(n, n) * 0.1;
        let bl = blocks(&mesh, l, &priors);
        let seq = sequential_gain_posterior(&d, &bl).unwrap();
        let dir = direct_posterior(&d, &bl).unwrap();
        assert!((&seq - &dir).norm() <= 1e-8 * dir.norm());
    }

    #[test]
    fn singular_gain_names_stage() {
        let d = DMatrix::<f64>::zeros(2, 2);
        let g = DMatrix::identity(2, 2);
        let bad = vec![(g.clone(), DVector::from_element(2, 1.0)), (g, DVector::from_element(2, 0.0))];
        assert!(matches!(sequential_gain_posterior(&d, &bad), Err(Error::SingularGain(GainStage::W2))));
    }

    #[test]
    fn uninformative_observations_leave_members() {
        let (map, _, d) = linear_setup(0);
        let priors = EnkfPriors::new(1e30, 1e30, 1e30, 0.5, 0.05, 0.6).unwrap();
        let ens = init_ensemble(&map, &priors, 10, 5).unwrap();
        let after = analysis(&ens, &d, &priors, AnalysisOptions { seed: 1, perturb: true }).unwrap();
        let diff = (after.members() - ens.members()).rows(0, ens.variance_len()).abs().max();
        assert!(diff < 1e-20, "{diff}");
    }

    #[test]
    fn zero_spread_gives_identical_members() {
        let (map, _, _) = linear_setup(0);
        let priors = EnkfPriors::new(1e-3, 0.05, 0.02, 0.5, 0.0, 0.6).unwrap();
        let ens = init_ensemble(&map, &priors, 5, 9).unwrap();
        for c in 0..5 {
            assert!(ens.members().column(c).rows(0, ens.variance_len()).iter().all(|v| *v == 0.5));
            assert_eq!(ens.predicted(c), ens.predicted(0));
        }
        let x = DVector::from_element(ens.variance_len(), 0.5);
        let expect = &map.h * x;
        assert_eq!(ens.predicted(0), expect.iter().cloned().collect::<Vec<_>>());
    }

    #[test]
    fn ensemble_mean_converges_to_prior() {
        let (map, _, _) = linear_setup(0);
        let priors = EnkfPriors::new(1e-3, 0.05, 0.02, 0.5, 0.05, 0.6).unwrap();
        let j = 10_000;
        let ens = init_ensemble(&map, &priors, j, 11).unwrap();
        let mean = ens.mean_variance();
        let bound = 3.0 * priors.init_std / (j as f64).sqrt();
        assert!(mean.values().iter().all(|v| (v - 0.5).abs() <= bound));
    }

    #[test]
    fn covariance_is_psd() {
        let (map, priors, _) = linear_setup(0);
        let ens = init_ensemble(&map, &priors, 8, 2).unwrap();
        let cov = ens.covariance();
        assert!((&cov - cov.transpose()).abs().max() < 1e-15);
        let eig = SymmetricEigen::new(cov.clone());
        assert!(eig.eigenvalues.min() >= -1e-10 * cov.trace());
    }

    #[test]
    fn deterministic_runs_are_bit_identical() {
        let (map, priors, d) = linear_setup(2);
        let opts = EnkfOptions { ensemble_size: 12, max_iters: 3, residual_tol: 0.0, seed: 4, perturb: true };
        let a = run_enkf(&map, &d, &priors, &opts).unwrap();
        let b = run_enkf(&map, &d, &priors, &opts).unwrap();
        assert_eq!(a.ensemble, b.ensemble);
        assert_eq!(a.residual_history, b.residual_history);
    }

    #[test]
    fn infinite_tolerance_stops_after_one_iteration() {
        let (map, priors, d) = linear_setup(2);
        let opts = EnkfOptions { ensemble_size: 6, max_iters: 10, residual_tol: f64::INFINITY, seed: 1, perturb: true };
        let r = run_enkf(&map, &d, &priors, &opts).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.stop_reason, StopReason::DiscrepancyMet);
    }

    #[test]
    fn zero_variance_member_predicts_payoff() {
        let mesh = build_mesh(0.1, 0.25, -2.0, 2.0, 0.3).unwrap();
        let q = vec![Quote::new(0.2, -0.5, 0.0), Quote::new(0.3, 0.25, 0.0)];
        let obs = ObservationSet::new(q, 1.0).unwrap();
        let map = DupireMap::new(ForwardParams::new(1.0, 0.0, 0.0).unwrap(), build_observation_operator(&mesh, &obs).unwrap());
        let m = mesh.node_count();
        let members = DMatrix::zeros(m + 2, 2);
        let ens = predict(&EnsembleState::from_members(mesh, 2, members).unwrap(), &map).unwrap();
        // Clamped at the floor, prices stay within rounding of the payoff.
        for (k, y) in [-0.5f64, 0.25].iter().enumerate() {
            assert!((ens.predicted(0)[k] - crate::forward::payoff(1.0, *y)).abs() < 1e-3);
        }
    }

    #[test]
    fn residual_decreases_on_noise_free_data() {
        let mesh = build_mesh(0.05, 0.1, -2.0, 2.0, 0.5).unwrap();
        let p = ForwardParams::new(1.0, 0.0, 0.0).unwrap();
        let mut q = Vec::new();
        for t in [0.2, 0.35, 0.5] {
            for k in -4..=4 {
                q.push(Quote::new(t, k as f64 * 0.1, 0.0));
            }
        }
        let obs = ObservationSet::new(q, 1.0).unwrap();
        let op = build_observation_operator(&mesh, &obs).unwrap();
        let map = DupireMap::new(p, op);
        let truth = VarianceSurface::constant(mesh, 0.3f64.powi(2) / 2.0).unwrap();
        let d = map.predict(&truth).unwrap();
        let w = PenaltyWeights::new(1e6, 0.0, 1e-2, 1e-3, 0.2f64.powi(2) / 2.0).unwrap();
        let priors = EnkfPriors::from_weights(&w, &mesh, 0.01, 0.5).unwrap();
        let opts = EnkfOptions { ensemble_size: 60, max_iters: 4, residual_tol: 0.0, seed: 3, perturb: false };
        let r = run_enkf(&map, &d, &priors, &opts).unwrap();
        for w in r.residual_history[..3].windows(2) {
            assert!(w[1] < w[0], "{:?}", r.residual_history);
        }
    }
}
