//! Derivative-free minimization of a scalar function on an interval.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub fx: f64,
    /// The minimizer sits on an end of the search interval.
    pub at_bound: bool,
    pub evaluations: usize,
}

/// Coarse uniform scan followed by Brent's method (golden section with
/// parabolic steps) around the best scan point.
///
/// Non-finite function values are treated as `+inf`.
pub fn minimize_scalar<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    scan_points: usize,
    rel_tol: f64,
) -> Minimum {
    assert!(lo < hi, "empty interval [{lo}, {hi}]");
    let mut evals = 0;
    let mut eval = |x: f64| {
        evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let n = scan_points.max(3);
    let grid: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&x| eval(x)).collect();
    let mut best = 0;
    for k in 1..n {
        if vals[k] < vals[best] {
            best = k;
        }
    }
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(n - 1)];
    let (x, fx) = brent(&mut eval, a, b, grid[best], vals[best], rel_tol);
    let (x, fx) = if fx <= vals[best] { (x, fx) } else { (grid[best], vals[best]) };
    let edge_tol = 2.0 * rel_tol * x.abs().max(1e-300) + 1e-300;
    let at_bound = (x - lo).abs() <= edge_tol || (hi - x).abs() <= edge_tol;
    Minimum { x, fx, at_bound, evaluations: evals }
}

/// Brent's minimizer on `[a, b]` starting from `x` with known `f(x) = fx`.
fn brent<F: FnMut(f64) -> f64>(f: &mut F, mut a: f64, mut b: f64, x0: f64, fx0: f64, rel_tol: f64) -> (f64, f64) {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let (mut x, mut w, mut v) = (x0, x0, x0);
    let (mut fx, mut fw, mut fv) = (fx0, fx0, fx0);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..200 {
        let xm = 0.5 * (a + b);
        let tol1 = rel_tol * x.abs() + 1e-12 * (b - a).abs().max(f64::MIN_POSITIVE);
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            (v, fv) = (w, fw);
            (w, fw) = (x, fx);
            (x, fx) = (u, fu);
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                (v, fv) = (w, fw);
                (w, fw) = (u, fu);
            } else if fu <= fv || v == x || v == w {
                (v, fv) = (u, fu);
            }
        }
    }
    (x, fx)
}
