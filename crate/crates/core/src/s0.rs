//! Joint estimation of the underlying price and the variance surface.
//!
//! Changing `S0` moves every quote in log-moneyness, so the two unknowns are
//! estimated alternately: the surface with `S0` fixed, then `S0` with the
//! surface fixed, minimizing
//!
//! ```text
//! phi(a, s0) + (alpha4 + alpha5) (s0 - s0_obs)^2 / s0_obs^2
//! ```
//!
//! over `s0`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::forward::{solve_forward, ForwardParams};
use crate::metrics::{normalized_distance, Region};
use crate::mesh::{build_observation_operator, MeshSpec, ObservationOperator, ObservationSet, Quote, VarianceSurface};
use crate::minimize::minimize_scalar;
use crate::tikhonov::{calibrate, PenaltyWeights, TikhonovOptions, WingRule};

/// Relative change in `s0` below which the outer loop stops.
pub const S0_REL_TOL: f64 = 1e-5;
const SCAN_POINTS: usize = 41;
const BRENT_REL_TOL: f64 = 1e-6;

/// A quote located by strike instead of log-moneyness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrikeQuote {
    pub tau: f64,
    pub strike: f64,
    pub price: f64,
    pub bid: Option<f64>,
    pub ask: Option<f64>,
    pub volume: Option<f64>,
}

impl StrikeQuote {
    pub fn new(tau: f64, strike: f64, price: f64) -> Self {
        Self { tau, strike, price, bid: None, ask: None, volume: None }
    }

    pub fn at(&self, s0: f64) -> Quote {
        Quote { tau: self.tau, y: (self.strike / s0).ln(), price: self.price, bid: self.bid, ask: self.ask, volume: self.volume }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct S0Config {
    pub s0_observed: f64,
    pub alpha4: f64,
    pub alpha5: f64,
    pub outer_iters: usize,
    pub s0_bounds: (f64, f64),
}

impl S0Config {
    /// Bounds default to `[s0_observed / 2, 2 s0_observed]`.
    pub fn new(s0_observed: f64, alpha4: f64, alpha5: f64, outer_iters: usize) -> Result<Self> {
        Self::with_bounds(s0_observed, alpha4, alpha5, outer_iters, (0.5 * s0_observed, 2.0 * s0_observed))
    }

    pub fn with_bounds(
        s0_observed: f64,
        alpha4: f64,
        alpha5: f64,
        outer_iters: usize,
        s0_bounds: (f64, f64),
    ) -> Result<Self> {
        if !(s0_observed > 0.0 && s0_observed.is_finite()) {
            return Err(Error::InvalidParameter { field: "s0_observed", reason: format!("must be > 0, got {s0_observed}") });
        }
        for (field, v) in [("alpha4", alpha4), ("alpha5", alpha5)] {
            if !(v >= 0.0) {
                return Err(Error::InvalidParameter { field, reason: format!("must be >= 0, got {v}") });
            }
        }
        let (lo, hi) = s0_bounds;
        if !(lo > 0.0 && lo <= s0_observed && s0_observed <= hi && hi.is_finite()) {
            return Err(Error::InvalidParameter {
                field: "s0_bounds",
                reason: format!("[{lo}, {hi}] must be positive and contain {s0_observed}"),
            });
        }
        Ok(Self { s0_observed, alpha4, alpha5, outer_iters, s0_bounds })
    }

    fn penalty(&self, s0: f64) -> f64 {
        let rel = (s0 - self.s0_observed) / self.s0_observed;
        (self.alpha4 + self.alpha5) * rel * rel
    }
}

/// Locates every quote at `y = ln(K / s0)` and builds the matching operator.
pub fn remap_observations(
    raw: &[StrikeQuote],
    s0: f64,
    mesh: &MeshSpec,
) -> Result<(ObservationSet, ObservationOperator)> {
    if let Some(q) = raw.iter().find(|q| !(q.strike > 0.0)) {
        return Err(Error::InvalidParameter { field: "strike", reason: format!("must be > 0, got {}", q.strike) });
    }
    let quotes: Vec<Quote> = raw.iter().map(|q| q.at(s0)).collect();
    let kept: Vec<Quote> = quotes.iter().copied().filter(|q| mesh.contains(q.tau, q.y)).collect();
    if kept.len() < quotes.len() {
        log::warn!("s0 = {s0}: dropped {} of {} quotes outside the mesh", quotes.len() - kept.len(), quotes.len());
    }
    if kept.is_empty() {
        return Err(Error::NoQuotes(format!("no quote lies inside the mesh at s0 = {s0}")));
    }
    let obs = ObservationSet::new(kept, s0)?;
    let op = build_observation_operator(mesh, &obs)?;
    Ok((obs, op))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct S0Stage {
    pub s0: f64,
    pub objective: f64,
    /// No interior minimum was found inside the bounds.
    pub at_bound: bool,
}

/// Misfit of the fixed surface against the quotes remapped at `s0`, plus the
/// `s0` penalty.
pub fn s0_objective(
    a_fixed: &VarianceSurface,
    raw: &[StrikeQuote],
    cfg: &S0Config,
    p: &ForwardParams,
    alpha0: f64,
    s0: f64,
) -> Result<f64> {
    let unit = solve_forward(a_fixed, &p.with_s0(1.0))?;
    Ok(objective_from_unit(&unit, raw, cfg, alpha0, s0))
}

/// Prices scale linearly with `S0` at fixed log-moneyness, so one solve at
/// `S0 = 1` serves every trial value.
fn objective_from_unit(unit: &crate::mesh::PriceSurface, raw: &[StrikeQuote], cfg: &S0Config, alpha0: f64, s0: f64) -> f64 {
    let mut sum = 0.0;
    let mut used = 0;
    for q in raw {
        if let Ok(v) = unit.interpolate(q.tau, (q.strike / s0).ln()) {
            sum += (s0 * v - q.price).powi(2);
            used += 1;
        }
    }
    if used == 0 {
        return f64::INFINITY;
    }
    alpha0 * sum + cfg.penalty(s0)
}

/// Best `s0` inside the configured bounds for a fixed surface.
pub fn s0_stage(
    a_fixed: &VarianceSurface,
    raw: &[StrikeQuote],
    cfg: &S0Config,
    p: &ForwardParams,
    alpha0: f64,
) -> Result<S0Stage> {
    let unit = solve_forward(a_fixed, &p.with_s0(1.0))?;
    let (lo, hi) = cfg.s0_bounds;
    let m = minimize_scalar(|s| objective_from_unit(&unit, raw, cfg, alpha0, s), lo, hi, SCAN_POINTS, BRENT_REL_TOL);
    if !m.fx.is_finite() {
        return Err(Error::NoQuotes("no quote lies inside the mesh for any s0 in the bounds".into()));
    }
    if m.at_bound {
        log::warn!("s0 stage: minimum {} on the boundary of [{lo}, {hi}]", m.x);
    }
    Ok(S0Stage { s0: m.x, objective: m.fx, at_bound: m.at_bound })
}

#[derive(Debug, Clone)]
pub struct S0Result {
    pub surface: VarianceSurface,
    /// `s0` used by each surface stage.
    pub s0_history: Vec<f64>,
    /// Distance to the reference surface after each surface stage.
    pub distance_history: Vec<f64>,
    /// Objective value reached by each `s0` stage.
    pub objective_history: Vec<f64>,
    pub final_s0: f64,
    pub converged: bool,
    pub hit_bound: bool,
}

impl S0Result {
    pub fn outer_iterations(&self) -> usize {
        self.s0_history.len()
    }
}

/// Writes `iteration,s0,distance,objective` rows.
pub fn write_s0_history_csv<W: Write>(res: &S0Result, mut out: W) -> Result<()> {
    writeln!(out, "iteration,s0,distance,objective")?;
    for (k, s0) in res.s0_history.iter().enumerate() {
        let dist = res.distance_history.get(k).map(|d| crate::data::fmt17(*d)).unwrap_or_default();
        writeln!(out, "{},{},{},{}", k + 1, crate::data::fmt17(*s0), dist, crate::data::fmt17(res.objective_history[k]))?;
    }
    writeln!(out, "final,{},,", crate::data::fmt17(res.final_s0))?;
    Ok(())
}

/// Alternates a surface stage (supplied by the caller) with [`s0_stage`].
///
/// `a_stage` receives the previous surface as a warm start together with the
/// quotes remapped at the current `s0`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_with_s0_using<F>(
    raw: &[StrikeQuote],
    cfg: &S0Config,
    p: &ForwardParams,
    alpha0: f64,
    a_init: &VarianceSurface,
    mut a_stage: F,
    reference: Option<(&VarianceSurface, &Region)>,
) -> Result<S0Result>
where
    F: FnMut(&VarianceSurface, &ForwardParams, &ObservationOperator, &ObservationSet) -> Result<VarianceSurface>,
{
    let mesh = *a_init.mesh();
    let mut s0 = cfg.s0_observed;
    let mut surface = a_init.clone();
    let mut res = S0Result {
        surface: surface.clone(),
        s0_history: vec![],
        distance_history: vec![],
        objective_history: vec![],
        final_s0: s0,
        converged: false,
        hit_bound: false,
    };
    for k in 0..cfg.outer_iters.max(1) {
        let (obs, op) = remap_observations(raw, s0, &mesh)?;
        let pk = p.with_s0(s0);
        surface = a_stage(&surface, &pk, &op, &obs)?;
        res.s0_history.push(s0);
        if let Some((truth, region)) = reference {
            res.distance_history.push(normalized_distance(&surface, truth, region)?);
        }
        let stage = s0_stage(&surface, raw, cfg, p, alpha0)?;
        res.objective_history.push(stage.objective);
        res.hit_bound |= stage.at_bound;
        let change = (stage.s0 - s0).abs() / s0;
        log::info!("outer iteration {}: s0 {s0} -> {}", k + 1, stage.s0);
        s0 = stage.s0;
        if change < S0_REL_TOL {
            res.converged = true;
            break;
        }
    }
    res.final_s0 = s0;
    res.surface = surface;
    Ok(res)
}

/// [`calibrate_with_s0_using`] with Tikhonov surface stages. A scarce wing
/// rule is rebuilt for the quote locations at each `s0`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_with_s0(
    raw: &[StrikeQuote],
    cfg: &S0Config,
    p: &ForwardParams,
    w: &PenaltyWeights,
    opts: &TikhonovOptions,
    a_init: &VarianceSurface,
    reference: Option<(&VarianceSurface, &Region)>,
) -> Result<S0Result> {
    calibrate_with_s0_using(
        raw,
        cfg,
        p,
        w.alpha0,
        a_init,
        |warm, pk, op, obs| {
            let mut o = opts.clone();
            if let WingRule::Scarce { floor, .. } = opts.wing {
                o.wing = WingRule::scarce(obs, op.mesh(), floor);
            }
            Ok(calibrate(warm, pk, op, obs, w, &o)?.surface)
        },
        reference,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::predict_data;
    use crate::mesh::build_mesh;
    use approx::assert_abs_diff_eq;

    fn raw_quotes() -> Vec<StrikeQuote> {
        let mut v = Vec::new();
        for &t in &[0.2, 0.4] {
            for k in [0.8, 0.9, 1.0, 1.1, 1.2] {
                v.push(StrikeQuote::new(t, k, 0.0));
            }
        }
        v
    }

    #[test]
    fn doubling_s0_shifts_y_by_ln2() {
        let mesh = build_mesh(0.1, 0.1, -3.0, 3.0, 0.5).unwrap();
        let raw = raw_quotes();
        let (a, _) = remap_observations(&raw, 1.0, &mesh).unwrap();
        let (b, _) = remap_observations(&raw, 2.0, &mesh).unwrap();
        for (qa, qb) in a.quotes().iter().zip(b.quotes()) {
            assert_abs_diff_eq!(qa.y - qb.y, std::f64::consts::LN_2, epsilon = 1e-14);
        }
        let (c, _) = remap_observations(&raw, 0.95, &mesh).unwrap();
        let (back, _) = remap_observations(&raw, 1.0, &mesh).unwrap();
        for ((qa, qc), qb) in a.quotes().iter().zip(c.quotes()).zip(back.quotes()) {
            assert_abs_diff_eq!(qc.y - qa.y, (1.0f64 / 0.95).ln(), epsilon = 1e-14);
            assert_abs_diff_eq!(qa.y, qb.y, epsilon = 1e-14);
        }
    }

    #[test]
    fn all_quotes_outside_is_an_error() {
        let mesh = build_mesh(0.1, 0.1, -0.1, 0.1, 0.5).unwrap();
        let raw = vec![StrikeQuote::new(0.2, 5.0, 0.0)];
        assert!(matches!(remap_observations(&raw, 1.0, &mesh), Err(Error::NoQuotes(_))));
    }

    fn synthetic(s_true: f64) -> (MeshSpec, ForwardParams, VarianceSurface, Vec<StrikeQuote>) {
        let mesh = build_mesh(0.02, 0.05, -3.0, 3.0, 0.5).unwrap();
        let truth = VarianceSurface::from_volatility(mesh, |_, y| 0.3 - 0.1 * y).unwrap();
        let p = ForwardParams::new(s_true, 0.0, 0.0).unwrap();
        let mut raw = raw_quotes();
        let (obs, op) = remap_observations(&raw, s_true, &mesh).unwrap();
        let d = predict_data(&truth, &p, &op).unwrap();
        assert_eq!(obs.len(), raw.len());
        for (q, v) in raw.iter_mut().zip(d) {
            q.price = v;
        }
        (mesh, p, truth, raw)
    }

    #[test]
    fn recovers_true_s0_from_clean_data() {
        let (_, p, truth, raw) = synthetic(1.0);
        let cfg = S0Config::new(0.95, 0.0, 0.0, 1).unwrap();
        let st = s0_stage(&truth, &raw, &cfg, &p, 1e4).unwrap();
        assert!((st.s0 - 1.0).abs() < 1e-4, "{}", st.s0);
        assert!(!st.at_bound);
    }

    #[test]
    fn heavy_penalty_pins_observed_s0() {
        let (_, p, truth, raw) = synthetic(1.0);
        let cfg = S0Config::new(0.95, 1e12, 1e12, 1).unwrap();
        let st = s0_stage(&truth, &raw, &cfg, &p, 1e4).unwrap();
        assert!((st.s0 - 0.95).abs() < 1e-5, "{}", st.s0);
    }

    #[test]
    fn correct_s0_converges_in_one_outer_iteration() {
        let (_, p, truth, raw) = synthetic(1.0);
        let cfg = S0Config::new(1.0, 0.0, 0.0, 5).unwrap();
        let res = calibrate_with_s0_using(&raw, &cfg, &p, 1e4, &truth, |a, _, _, _| Ok(a.clone()), None).unwrap();
        assert!(res.converged);
        assert_eq!(res.outer_iterations(), 1);
        assert!((res.final_s0 - 1.0).abs() < 1e-5);
    }

    #[test]
    fn s0_stage_does_not_increase_objective() {
        let (_, p, truth, raw) = synthetic(1.0);
        let cfg = S0Config::new(0.9, 10.0, 10.0, 1).unwrap();
        let before = s0_objective(&truth, &raw, &cfg, &p, 1e4, 0.9).unwrap();
        let st = s0_stage(&truth, &raw, &cfg, &p, 1e4).unwrap();
        assert!(st.objective <= before);
        assert_abs_diff_eq!(s0_objective(&truth, &raw, &cfg, &p, 1e4, st.s0).unwrap(), st.objective, epsilon = 1e-12);
    }

    #[test]
    fn bounds_must_contain_observed() {
        assert!(S0Config::with_bounds(1.0, 0.0, 0.0, 3, (1.1, 2.0)).is_err());
        assert!(S0Config::new(-1.0, 0.0, 0.0, 3).is_err());
    }
}
