//! Black–Scholes call pricing and implied-volatility inversion.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Initial bracket for the implied-volatility search (annualized).
const VOL_BRACKET: (f64, f64) = (1e-4, 5.0);
/// Bracket used when the initial one does not contain the root.
const VOL_BRACKET_WIDE: (f64, f64) = (1e-8, 50.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsQuote {
    pub spot: f64,
    pub strike: f64,
    pub tau: f64,
    pub rate: f64,
    /// Continuous dividend yield.
    pub dividend: f64,
    pub vol: f64,
}

impl BsQuote {
    pub fn new(spot: f64, strike: f64, tau: f64, rate: f64, vol: f64) -> Self {
        Self { spot, strike, tau, rate, dividend: 0.0, vol }
    }

    pub fn with_dividend(self, dividend: f64) -> Self {
        Self { dividend, ..self }
    }

    fn with_vol(self, vol: f64) -> Self {
        Self { vol, ..self }
    }
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn d1_d2(q: &BsQuote) -> (f64, f64) {
    let sd = q.vol * q.tau.sqrt();
    let d1 = ((q.spot / q.strike).ln() + (q.rate - q.dividend) * q.tau) / sd + 0.5 * sd;
    (d1, d1 - sd)
}

/// European call value.
pub fn bs_call_price(q: &BsQuote) -> f64 {
    let df = (-q.rate * q.tau).exp();
    let fwd_df = q.spot * (-q.dividend * q.tau).exp();
    if q.vol * q.tau.sqrt() < 1e-300 {
        return (fwd_df - q.strike * df).max(0.0);
    }
    let (d1, d2) = d1_d2(q);
    fwd_df * norm_cdf(d1) - q.strike * df * norm_cdf(d2)
}

/// Sensitivity of the call value to volatility.
pub fn bs_vega(q: &BsQuote) -> f64 {
    let (d1, _) = d1_d2(q);
    q.spot * (-q.dividend * q.tau).exp() * norm_pdf(d1) * q.tau.sqrt()
}

/// No-arbitrage bounds `(intrinsic, upper)` for a call price.
pub fn call_bounds(spot: f64, strike: f64, tau: f64, rate: f64, dividend: f64) -> (f64, f64) {
    let fwd_df = spot * (-dividend * tau).exp();
    ((fwd_df - strike * (-rate * tau).exp()).max(0.0), fwd_df)
}

/// Implied volatility of a call price with zero dividend yield.
pub fn implied_vol(price: f64, spot: f64, strike: f64, tau: f64, rate: f64) -> Result<f64> {
    implied_vol_with_dividend(price, spot, strike, tau, rate, 0.0)
}

/// Volatility reproducing `price` to within 1e-12 relative to the spot,
/// found by safeguarded Newton iteration inside a bisection bracket.
pub fn implied_vol_with_dividend(
    price: f64,
    spot: f64,
    strike: f64,
    tau: f64,
    rate: f64,
    dividend: f64,
) -> Result<f64> {
    for (field, v) in [("spot", spot), ("strike", strike), ("tau", tau)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter { field, reason: format!("must be > 0, got {v}") });
        }
    }
    let (lower, upper) = call_bounds(spot, strike, tau, rate, dividend);
    if !(price > lower) {
        return Err(Error::BelowIntrinsic { price, bound: lower });
    }
    if !(price < upper) {
        return Err(Error::AboveSpot { price, bound: upper });
    }
    let base = BsQuote { spot, strike, tau, rate, dividend, vol: 0.0 };
    let f = |v: f64| bs_call_price(&base.with_vol(v)) - price;

    let (mut lo, mut hi) = VOL_BRACKET;
    if f(lo) > 0.0 || f(hi) < 0.0 {
        (lo, hi) = VOL_BRACKET_WIDE;
        if f(lo) > 0.0 || f(hi) < 0.0 {
            return Err(Error::NoConvergence { price });
        }
    }
    let tol = 1e-12 * spot.max(1e-300);
    let mut vol = 0.5 * (lo + hi);
    for _ in 0..200 {
        let err = f(vol);
        if err.abs() <= tol {
            return Ok(vol);
        }
        if err > 0.0 {
            hi = vol;
        } else {
            lo = vol;
        }
        let vega = bs_vega(&base.with_vol(vol));
        let newton = vol - err / vega;
        vol = if vega > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-15 * hi {
            return Ok(vol);
        }
    }
    Err(Error::NoConvergence { price })
}
