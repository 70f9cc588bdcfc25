//! Comparison numbers: price residuals, implied-volatility misfits and the
//! normalized distance between surfaces.

use std::fmt;
use std::io::Write;

use crate::black_scholes::implied_vol_with_dividend;
use crate::error::{Error, Result};
use crate::forward::{predict_data, ForwardParams};
use crate::mesh::{build_observation_operator, MeshSpec, ObservationSet, VarianceSurface};

/// Set of mesh nodes entering [`normalized_distance`].
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Region {
    #[default]
    Full,
    /// Closed convex polygon in `(tau, y)`, counter-clockwise.
    Hull(Vec<(f64, f64)>),
}

const HULL_TOL: f64 = 1e-9;

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull by the monotone-chain algorithm, counter-clockwise, without
/// collinear points.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

impl Region {
    pub fn hull_of(obs: &ObservationSet) -> Self {
        let pts: Vec<(f64, f64)> = obs.quotes().iter().map(|q| (q.tau, q.y)).collect();
        Region::Hull(convex_hull(&pts))
    }

    pub fn contains(&self, tau: f64, y: f64) -> bool {
        match self {
            Region::Full => true,
            Region::Hull(h) if h.len() >= 3 => {
                let n = h.len();
                (0..n).all(|k| cross(h[k], h[(k + 1) % n], (tau, y)) >= -HULL_TOL)
            }
            Region::Hull(h) => {
                // Degenerate hull: a point or a segment.
                match h.as_slice() {
                    [] => false,
                    [p] => (p.0 - tau).abs() <= HULL_TOL && (p.1 - y).abs() <= HULL_TOL,
                    [a, b, ..] => {
                        let (lo_t, hi_t) = (a.0.min(b.0), a.0.max(b.0));
                        let (lo_y, hi_y) = (a.1.min(b.1), a.1.max(b.1));
                        cross(*a, *b, (tau, y)).abs() <= HULL_TOL
                            && tau >= lo_t - HULL_TOL
                            && tau <= hi_t + HULL_TOL
                            && y >= lo_y - HULL_TOL
                            && y <= hi_y + HULL_TOL
                    }
                }
            }
        }
    }

    /// Number of mesh nodes inside the region.
    pub fn node_count(&self, mesh: &MeshSpec) -> usize {
        let mut n = 0;
        for i in 0..mesh.n_tau() {
            for j in 0..mesh.n_y() {
                n += self.contains(mesh.tau(i), mesh.y(j)) as usize;
            }
        }
        n
    }
}

/// `|sigma_rec - sigma_true| / |sigma_true|` over the nodes of `region`,
/// with `sigma = sqrt(2 a)`.
pub fn normalized_distance(a: &VarianceSurface, truth: &VarianceSurface, region: &Region) -> Result<f64> {
    if a.mesh() != truth.mesh() {
        return Err(Error::ShapeMismatch("surfaces live on different meshes".into()));
    }
    let mesh = a.mesh();
    let (sr, st) = (a.volatility(), truth.volatility());
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..mesh.n_tau() {
        for j in 0..mesh.n_y() {
            if region.contains(mesh.tau(i), mesh.y(j)) {
                num += (sr[[i, j]] - st[[i, j]]).powi(2);
                den += st[[i, j]].powi(2);
            }
        }
    }
    if !(den > 0.0) {
        return Err(Error::InsufficientData("comparison region contains no nodes with nonzero volatility".into()));
    }
    Ok((num / den).sqrt())
}

/// Which quotes enter the implied-volatility metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum StrikeWindow {
    #[default]
    All,
    /// Strikes in currency, `K = s0_ref e^y`.
    Strike(f64, f64),
    LogMoneyness(f64, f64),
}

impl StrikeWindow {
    fn admits(&self, strike: f64, y: f64) -> bool {
        match *self {
            StrikeWindow::All => true,
            StrikeWindow::Strike(lo, hi) => strike >= lo && strike <= hi,
            StrikeWindow::LogMoneyness(lo, hi) => y >= lo && y <= hi,
        }
    }
}

/// Black–Scholes convention used to convert prices to implied volatilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolConvention {
    pub rate: f64,
    pub dividend: f64,
}

impl VolConvention {
    /// Rate `r` with dividend yield `r + b`, so the carry matches the
    /// convection term of the forward equation.
    pub fn from_params(p: &ForwardParams) -> Self {
        Self { rate: p.r, dividend: p.r + p.b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MisfitReport {
    pub rmse: f64,
    pub rwmse: f64,
    pub rr: f64,
    /// `|P u - d| / |d|` over all quotes.
    pub price_residual: f64,
    /// `sqrt(mean((P u - d)^2))` over all quotes.
    pub rms_price_residual: f64,
    /// Quotes entering the volatility metrics.
    pub n_vol: usize,
    /// Quotes in the window whose implied volatility could not be computed.
    pub n_failed: usize,
}

impl fmt::Display for MisfitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20}{:>14}", "metric", "value")?;
        writeln!(f, "{:<20}{:>14.6}", "RMSE", self.rmse)?;
        writeln!(f, "{:<20}{:>14.6}", "RWMSE", self.rwmse)?;
        writeln!(f, "{:<20}{:>14.6}", "RR", self.rr)?;
        writeln!(f, "{:<20}{:>14.6e}", "price residual", self.price_residual)?;
        writeln!(f, "{:<20}{:>14.6e}", "rms price residual", self.rms_price_residual)?;
        writeln!(f, "{:<20}{:>14}", "N_vol", self.n_vol)?;
        write!(f, "{:<20}{:>14}", "failed inversions", self.n_failed)
    }
}

pub const REPORT_HEADER: &str = "rmse,rwmse,rr,price_residual,rms_price_residual,n_vol,n_failed";

impl MisfitReport {
    pub fn csv_row(&self) -> String {
        use crate::data::fmt17;
        format!(
            "{},{},{},{},{},{},{}",
            fmt17(self.rmse),
            fmt17(self.rwmse),
            fmt17(self.rr),
            fmt17(self.price_residual),
            fmt17(self.rms_price_residual),
            self.n_vol,
            self.n_failed
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{REPORT_HEADER}")?;
        writeln!(out, "{}", self.csv_row())?;
        Ok(())
    }
}

/// RMSE, RWMSE and RR of model versus market implied volatilities.
///
/// Quotes with zero volume are skipped; a missing volume counts as weight 1.
/// Returns `(rmse, rwmse, rr, n_vol)`.
pub fn vol_misfit(model: &[f64], market: &[f64], volume: &[Option<f64>]) -> (f64, f64, f64, usize) {
    let (mut s2, mut sw, mut sm, mut n) = (0.0, 0.0, 0.0, 0usize);
    for ((il, iba), v) in model.iter().zip(market).zip(volume) {
        let w = v.unwrap_or(1.0);
        if !(w > 0.0) {
            continue;
        }
        let d2 = (il - iba).powi(2);
        s2 += d2;
        sw += d2 * w;
        sm += iba * iba;
        n += 1;
    }
    if n == 0 {
        return (0.0, 0.0, 0.0, 0);
    }
    let rr = if sm > 0.0 { s2.sqrt() / sm.sqrt() } else { 0.0 };
    ((s2 / n as f64).sqrt(), (sw / n as f64).sqrt(), rr, n)
}

/// Prices each quote under `recon` and compares implied volatilities with
/// those of the quoted bid/ask midpoints.
pub fn implied_misfit(
    recon: &VarianceSurface,
    obs: &ObservationSet,
    p: &ForwardParams,
    window: StrikeWindow,
    conv: VolConvention,
) -> Result<MisfitReport> {
    let op = build_observation_operator(recon.mesh(), obs)?;
    let model = predict_data(recon, p, &op)?;
    let data = obs.prices();
    let resid2: f64 = model.iter().zip(&data).map(|(m, d)| (m - d).powi(2)).sum();
    let dnorm2: f64 = data.iter().map(|d| d * d).sum();

    let (mut il, mut iba, mut vols) = (Vec::new(), Vec::new(), Vec::new());
    let mut n_failed = 0;
    for (q, &m) in obs.quotes().iter().zip(&model) {
        let strike = p.s0 * q.y.exp();
        if !window.admits(strike, q.y) {
            continue;
        }
        let market = implied_vol_with_dividend(q.mid(), p.s0, strike, q.tau, conv.rate, conv.dividend);
        let fitted = implied_vol_with_dividend(m, p.s0, strike, q.tau, conv.rate, conv.dividend);
        match (market, fitted) {
            (Ok(b), Ok(l)) => {
                iba.push(b);
                il.push(l);
                vols.push(q.volume);
            }
            _ => n_failed += 1,
        }
    }
    let (rmse, rwmse, rr, n_vol) = vol_misfit(&il, &iba, &vols);
    Ok(MisfitReport {
        rmse,
        rwmse,
        rr,
        price_residual: if dnorm2 > 0.0 { (resid2 / dnorm2).sqrt() } else { 0.0 },
        rms_price_residual: (resid2 / data.len() as f64).sqrt(),
        n_vol,
        n_failed,
    })
}
