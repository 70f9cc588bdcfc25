//! Acceptance suite. Each test prints one `criterion N ... PASS|FAIL` line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use locvol::black_scholes::{bs_call_price, bs_vega, call_bounds, implied_vol, BsQuote};
use locvol::cli::{run_calibration, RunConfig};
use locvol::data::complete_data;
use locvol::enkf::{direct_posterior, init_ensemble, sequential_gain_posterior, EnkfPriors};
use locvol::tikhonov::{calibrate, penalty, DiscrepancyConvention, DupireMap, ForwardMap, PenaltyWeights, StopReason, TikhonovOptions};
use locvol::{
    build_mesh, build_observation_operator, predict_data, solve_forward, ForwardParams, ObservationSet, Quote,
    VarianceSurface,
};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    // Written to the raw handle so the line shows without --nocapture.
    let mut err = std::io::stderr();
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(err, "criterion {n:>2} {name}: {status} ({detail})");
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn atm_error(dtau: f64, dy: f64) -> f64 {
    let mesh = build_mesh(dtau, dy, -5.0, 5.0, 0.5).unwrap();
    let a = VarianceSurface::constant(mesh, 0.08).unwrap();
    let p = ForwardParams::new(1.0, 0.0, 0.0).unwrap();
    let u = solve_forward(&a, &p).unwrap();
    let exact = bs_call_price(&BsQuote::new(1.0, 1.0, 0.5, 0.0, 0.4));
    (u.interpolate(0.5, 0.0).unwrap() - exact).abs() / exact
}

#[test]
fn criterion_01_forward_solver_matches_black_scholes() {
    let start = Instant::now();
    let coarse = atm_error(0.005, 0.025);
    let fine = atm_error(0.0025, 0.0125);
    let ratio = coarse / fine;
    let elapsed = start.elapsed();
    let pass = coarse <= 0.005 && (3.0..=5.0).contains(&ratio) && elapsed < Duration::from_secs(10);
    report(1, "forward solver oracle", pass, &format!("rel err {coarse:.3e}, ratio {ratio:.3}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_02_adjoint_gradient_matches_finite_differences() {
    let start = Instant::now();
    let mesh = build_mesh(0.5 / 11.0, 4.0 / 11.0, -2.0, 2.0, 0.5).unwrap();
    assert_eq!((mesh.m_tau(), mesh.m_y()), (10, 10));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = VarianceSurface::new(mesh, Array2::from_shape_fn(mesh.shape(), |_| rng.random_range(0.02..0.12))).unwrap();
    let quotes: Vec<Quote> = (0..15)
        .map(|k| Quote::new(0.05 + 0.03 * k as f64, rng.random_range(-1.5..1.5), 0.0))
        .collect();
    let obs = ObservationSet::new(quotes, 1.0).unwrap();
    let op = build_observation_operator(&mesh, &obs).unwrap();
    let p = ForwardParams::new(1.0, 0.01, 0.02).unwrap();
    let data: Vec<f64> = (0..obs.len()).map(|_| rng.random_range(0.0..0.4)).collect();
    let map = DupireMap::new(p, op);
    let (_, g) = map.misfit_gradient(&a, &data, 3.0).unwrap();

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let v = Array2::from_shape_fn(mesh.shape(), |_| rng.random_range(-1.0..1.0));
        let plus = VarianceSurface::new(mesh, a.values() + &(&v * eps)).unwrap();
        let minus = VarianceSurface::new(mesh, a.values() - &(&v * eps)).unwrap();
        let fd = (map.misfit(&plus, &data, 3.0).unwrap() - map.misfit(&minus, &data, 3.0).unwrap()) / (2.0 * eps);
        let an = (&g * &v).sum();
        worst = worst.max((fd - an).abs() / an.abs().max(1e-12));
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-5 && elapsed < Duration::from_secs(30);
    report(2, "adjoint gradient", pass, &format!("worst rel err {worst:.3e}, {elapsed:.2?}"));
    assert!(pass);
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(lo..hi))
}

#[test]
fn criterion_03_sequential_gains_equal_direct_inverse() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=30);
        let m = rng.random_range(1..n.max(2));
        let l = n - m;
        let d = random_spd(&mut rng, n);
        let h = DMatrix::from_fn(l.max(1), n, |_, _| rng.random_range(-1.0..1.0));
        let lt = DMatrix::from_fn(m, n, |r, c| if c == r { -1.0 } else if c == r + 1 { 1.0 } else { 0.0 });
        let ly = DMatrix::from_fn(m, n, |r, c| if c == r { 1.0 } else if c == (r + 2) % n { -1.0 } else { 0.0 });
        let blocks = vec![
            (h.clone(), random_vec(&mut rng, h.nrows(), 0.1, 2.0)),
            (lt, random_vec(&mut rng, m, 0.1, 2.0)),
            (ly, random_vec(&mut rng, m, 0.1, 2.0)),
        ];
        let seq = sequential_gain_posterior(&d, &blocks).unwrap();
        let dir = direct_posterior(&d, &blocks).unwrap();
        worst = worst.max((&seq - &dir).norm() / dir.norm());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-8 && elapsed < Duration::from_secs(5);
    report(3, "EnKF gain identity", pass, &format!("worst rel err {worst:.3e}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_04_synthetic_s0_recovery() {
    let start = Instant::now();
    let base = RunConfig::load(&config_path("synthetic_s0.toml")).unwrap();
    let mut finals = Vec::new();
    let mut distances = Vec::new();
    let mut decreasing = 0;
    for seed in 1..=5 {
        let cfg = RunConfig { seed, ..base.clone() };
        let out = run_calibration(&cfg).unwrap();
        let s0 = out.s0_result.as_ref().unwrap();
        let hist = &s0.distance_history;
        if hist.windows(2).all(|w| w[1] < w[0]) {
            decreasing += 1;
        }
        finals.push(out.s0);
        distances.push(*hist.last().unwrap());
    }
    let (ms, md) = (median(finals), median(distances));
    let pass = (ms - 1.0).abs() <= 0.01 && md <= 0.3 && decreasing >= 4;
    report(
        4,
        "synthetic S0 recovery",
        pass,
        &format!("median S0 {ms:.5}, median distance {md:.4}, decreasing {decreasing}/5, {:.1?}", start.elapsed()),
    );
    assert!(pass);
}

#[test]
fn criterion_05_practical_grid_s0_recovery() {
    let start = Instant::now();
    let cfg = RunConfig::load(&config_path("practical_grid_s0.toml")).unwrap();
    assert!(cfg.s0.outer_iters <= 5);
    let out = run_calibration(&cfg).unwrap();
    let hist = &out.s0_result.as_ref().unwrap().s0_history;
    let rel = (out.s0 - 2200.0).abs() / 2200.0;
    let pass = rel <= 0.02;
    report(
        5,
        "practical grid S0 recovery",
        pass,
        &format!("S0 {:.2} after {} outer iterations, rel err {rel:.4}, {:.1?}", out.s0, hist.len(), start.elapsed()),
    );
    assert!(pass);
}

#[test]
fn criterion_06_discrepancy_stopping() {
    let mut runs: Vec<(String, f64, f64, StopReason)> = Vec::new();

    // Noise-free data on a small mesh under both conventions.
    let mesh = build_mesh(0.05, 0.2, -2.0, 2.0, 0.5).unwrap();
    let p = ForwardParams::new(1.0, 0.0, 0.0).unwrap();
    let truth = VarianceSurface::from_volatility(mesh, |t, y| 0.3 + 0.05 * t - 0.1 * y).unwrap();
    let quotes: Vec<Quote> =
        [0.2, 0.35, 0.5].iter().flat_map(|&t| (-3..=3).map(move |k| Quote::new(t, 0.1 * k as f64, 0.0))).collect();
    let obs0 = ObservationSet::new(quotes, 1.0).unwrap();
    let op = build_observation_operator(&mesh, &obs0).unwrap();
    let d = predict_data(&truth, &p, &op).unwrap();
    let obs = ObservationSet::new(obs0.quotes().iter().zip(&d).map(|(q, &v)| Quote { price: v, ..*q }).collect(), 1.0).unwrap();
    let w = PenaltyWeights::new(1e4, 1e-4, 1e-4, 1e-4, 0.045).unwrap();
    let a0 = VarianceSurface::constant(mesh, 0.045).unwrap();
    for conv in [DiscrepancyConvention::PaperLiteral, DiscrepancyConvention::Common] {
        let opts = TikhonovOptions { convention: conv, max_iters: 300, ..TikhonovOptions::default() };
        let r = calibrate(&a0, &p, &op, &obs, &w, &opts).unwrap();
        runs.push((format!("noise-free {conv:?}"), r.final_misfit(), r.rho, r.stop_reason));
    }

    // The noisy synthetic set with the known S0.
    let mut cfg = RunConfig::load(&config_path("compare_modes.toml")).unwrap();
    cfg.variants.clear();
    for conv in [DiscrepancyConvention::PaperLiteral, DiscrepancyConvention::Common] {
        cfg.tikhonov.discrepancy_convention = conv;
        let r = run_calibration(&cfg).unwrap().tikhonov.unwrap();
        runs.push((format!("synthetic {conv:?}"), r.final_misfit(), r.rho, r.stop_reason));
    }

    let successes: Vec<_> = runs.iter().filter(|r| r.3 == StopReason::DiscrepancyMet).collect();
    let pass = !successes.is_empty() && successes.iter().all(|r| r.1 <= r.2);
    let detail: Vec<String> = runs.iter().map(|r| format!("{}: {:.3e} vs rho {:.3e} [{}]", r.0, r.1, r.2, r.3)).collect();
    report(6, "discrepancy stopping", pass, &format!("{} successful; {}", successes.len(), detail.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_07_scarce_beats_completed() {
    let start = Instant::now();
    let base = RunConfig::load(&config_path("compare_modes.toml")).unwrap();
    let scarce = base.variants.iter().find(|v| v.name == "scarce").unwrap();
    let completed = base.variants.iter().find(|v| v.name == "completed").unwrap();
    let (mut rs, mut rc) = (Vec::new(), Vec::new());
    for seed in 1..=5 {
        let cfg = RunConfig { seed, ..base.clone() };
        rs.push(run_calibration(&cfg.with_variant(scarce)).unwrap().report.rmse);
        rc.push(run_calibration(&cfg.with_variant(completed)).unwrap().report.rmse);
    }
    let (ms, mc) = (median(rs), median(rc));
    let pass = ms <= mc;
    report(
        7,
        "scarce vs completed",
        pass,
        &format!("median RMSE scarce {ms:.5}, completed {mc:.5}, {:.1?}", start.elapsed()),
    );
    assert!(pass);
}

#[test]
fn criterion_08_implied_vol_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 100 {
        let spot = rng.random_range(50.0..150.0);
        let strike = spot * rng.random_range(-0.5f64..0.5).exp();
        let tau = rng.random_range(0.05..2.0);
        let rate = rng.random_range(0.0..0.05);
        let q = BsQuote::new(spot, strike, tau, rate, rng.random_range(0.1..0.8));
        let price = bs_call_price(&q);
        let (lo, hi) = call_bounds(spot, strike, tau, rate, 0.0);
        if bs_vega(&q) < 1e-4 * spot || price <= lo || price >= hi {
            continue;
        }
        let vol = implied_vol(price, spot, strike, tau, rate).unwrap();
        worst = worst.max((bs_call_price(&BsQuote { vol, ..q }) - price).abs());
        n += 1;
    }
    let pass = worst <= 1e-8;
    report(8, "implied vol round trip", pass, &format!("worst abs err {worst:.3e} over {n} quotes"));
    assert!(pass);
}

const DETERMINISM_CONFIG: &str = r#"
seed = 4

[mesh]
dtau = 0.05
dy = 0.1
l_y = -3.0
r_y = 3.0
t_max = 0.5

[forward]
s0 = 0.97
surface = { kind = "truth", truth = { kind = "bump" } }

[penalty]
alpha0 = 1e4
alpha1 = 1e1
alpha2 = 1e2
alpha3 = 1.0

[method]
s0_adjust = true

[tikhonov]
max_iters = 30

[enkf]
ensemble_size = 6
max_iters = 2

[s0]
outer_iters = 2

[synthetic]
truth = { kind = "bump" }
true_s0 = 1.0
fine_dtau = 0.025
fine_dy = 0.05
taus = [0.2, 0.4]
ys = [-0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.3]

[[variants]]
name = "tikhonov"
kind = "tikhonov"

[[variants]]
name = "enkf"
kind = "enkf"
s0_adjust = false
"#;

fn run_binary(cmd: &str, config: &Path, out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_locvol"))
        .args([cmd, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{cmd}: {}", String::from_utf8_lossy(&status.stdout));
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_09_outputs_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, DETERMINISM_CONFIG).unwrap();
    let mut mismatched = Vec::new();
    let mut count = 0;
    for cmd in ["forward", "synth", "calibrate", "compare"] {
        let (a, b) = (tmp.path().join(format!("{cmd}_a")), tmp.path().join(format!("{cmd}_b")));
        run_binary(cmd, &config, &a);
        run_binary(cmd, &config, &b);
        let (fa, fb) = (read_dir_sorted(&a), read_dir_sorted(&b));
        count += fa.len();
        if fa.is_empty() || fa != fb {
            mismatched.push(cmd);
        }
    }
    let pass = mismatched.is_empty();
    report(9, "determinism", pass, &format!("{count} files compared, mismatched commands {mismatched:?}"));
    assert!(pass);
}

#[test]
fn criterion_10_property_suites() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut failures: Vec<&str> = Vec::new();
    let mesh = build_mesh(0.05, 0.1, -2.0, 2.0, 0.5).unwrap();
    let p = ForwardParams::new(1.0, 0.0, 0.01).unwrap();

    // Linearity of the observation operator.
    let quotes: Vec<Quote> = (0..20)
        .map(|k| Quote::new(0.02 + 0.024 * k as f64, rng.random_range(-1.8..1.8), 0.0))
        .collect();
    let obs = ObservationSet::new(quotes, 1.0).unwrap();
    let op = build_observation_operator(&mesh, &obs).unwrap();
    for _ in 0..50 {
        let u = Array2::from_shape_fn(mesh.shape(), |_| rng.random_range(-1.0..1.0));
        let v = Array2::from_shape_fn(mesh.shape(), |_| rng.random_range(-1.0..1.0));
        let (al, be) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let lhs = op.apply_values(&(&u * al + &v * be));
        let (pu, pv) = (op.apply_values(&u), op.apply_values(&v));
        if lhs.iter().zip(pu.iter().zip(&pv)).any(|(l, (x, y))| (l - (al * x + be * y)).abs() > 1e-12) {
            failures.push("linearity");
            break;
        }
    }

    // Maximum principle: prices stay within [0, S0].
    for _ in 0..20 {
        let a = VarianceSurface::new(mesh, Array2::from_shape_fn(mesh.shape(), |_| rng.random_range(0.005..0.3))).unwrap();
        let u = solve_forward(&a, &ForwardParams::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        if u.values().iter().any(|&x| !(-1e-12..=1.0 + 1e-12).contains(&x)) {
            failures.push("maximum principle");
            break;
        }
    }

    // Penalty zero cases.
    let w = PenaltyWeights::new(1.0, 2.0, 3.0, 4.0, 0.07).unwrap();
    if penalty(&VarianceSurface::constant(mesh, 0.07).unwrap(), &w) != 0.0 {
        failures.push("penalty at prior");
    }
    let w0 = PenaltyWeights::new(1.0, 0.0, 3.0, 4.0, 0.07).unwrap();
    if penalty(&VarianceSurface::constant(mesh, 0.2).unwrap(), &w0) != 0.0 {
        failures.push("penalty of constant without anchor");
    }

    // Ensemble covariance is positive semidefinite.
    let small = build_mesh(0.25, 0.5, -1.0, 1.0, 0.5).unwrap();
    let sq = vec![Quote::new(0.25, 0.0, 0.0), Quote::new(0.5, 0.5, 0.0)];
    let sobs = ObservationSet::new(sq, 1.0).unwrap();
    let map = DupireMap::new(p, build_observation_operator(&small, &sobs).unwrap());
    let priors = EnkfPriors::new(1e-4, 0.1, 0.1, 0.08, 0.02, 0.5).unwrap();
    for seed in 0..5 {
        let ens = init_ensemble(&map, &priors, 12, seed).unwrap();
        let cov = ens.covariance();
        let trace = cov.trace();
        let min_eig = cov.symmetric_eigenvalues().min();
        if min_eig < -1e-10 * trace {
            failures.push("covariance PSD");
            break;
        }
    }

    // Completion reproduces original quotes at their nodes.
    let on_node: Vec<Quote> = [2usize, 5, 9]
        .iter()
        .flat_map(|&i| (12..=28).step_by(4).map(move |j| (i, j)))
        .map(|(i, j)| Quote::new(mesh.tau(i), mesh.y(j), 0.0))
        .collect();
    let nobs = ObservationSet::new(on_node, 1.0).unwrap();
    let nop = build_observation_operator(&mesh, &nobs).unwrap();
    let truth = VarianceSurface::constant(mesh, 0.06).unwrap();
    let prices = predict_data(&truth, &p, &nop).unwrap();
    let nobs = ObservationSet::new(nobs.quotes().iter().zip(&prices).map(|(q, &v)| Quote { price: v, ..*q }).collect(), 1.0)
        .unwrap();
    let done = complete_data(&nobs, &mesh, 1.0).unwrap();
    let exact = nobs.quotes().iter().all(|q| {
        done.quotes().iter().any(|c| (c.tau - q.tau).abs() < 1e-12 && (c.y - q.y).abs() < 1e-12 && c.price == q.price)
    });
    if !exact || done.len() != (mesh.n_tau() - 1) * mesh.n_y() {
        failures.push("completion exactness");
    }

    let pass = failures.is_empty();
    report(10, "property suites", pass, &format!("failures {failures:?}"));
    assert!(pass);
}
