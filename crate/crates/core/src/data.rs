//! Quote files, synthetic data sets and completion onto the full mesh.
//!
//! # File format
//!
//! ```text
//! #underlying=2112.7;rate=0.0025;trade_date=2015-05-01
//! tau,strike,bid,ask,mid,volume
//! 0.25,2100,54.1,55.3,54.7,120
//! ```
//!
//! The metadata line must come first; `rate` and `trade_date` are optional.
//! Other lines starting with `#` are comments. A `maturity` column
//! (`YYYY-MM-DD`, Act/365 from the trade date) may replace `tau`. Empty
//! fields mean "not quoted"; a missing `mid` is taken as `(bid + ask) / 2`.
//! Floats are written with 17 significant digits so that files round-trip
//! exactly.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::forward::{payoff, solve_forward, ForwardParams};
use crate::mesh::{build_observation_operator, MeshSpec, ObservationSet, Quote, VarianceSurface, A_FLOOR};
use crate::s0::StrikeQuote;

/// Scientific notation with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt17).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawQuoteFile {
    pub underlying: f64,
    pub rate: f64,
    pub trade_date: Option<NaiveDate>,
    pub quotes: Vec<StrikeQuote>,
}

fn parse_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse { line, reason: reason.into() }
}

fn parse_metadata(line: &str) -> Result<(f64, f64, Option<NaiveDate>)> {
    let body = line.strip_prefix('#').ok_or_else(|| parse_err(1, "missing '#underlying=' metadata line"))?;
    let (mut underlying, mut rate, mut date) = (None, 0.0, None);
    for part in body.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = part.split_once('=').ok_or_else(|| parse_err(1, format!("expected key=value, got '{part}'")))?;
        let value = value.trim();
        match key.trim() {
            "underlying" => {
                underlying = Some(value.parse::<f64>().map_err(|e| parse_err(1, format!("underlying: {e}")))?)
            }
            "rate" => rate = value.parse::<f64>().map_err(|e| parse_err(1, format!("rate: {e}")))?,
            "trade_date" => {
                date = Some(
                    NaiveDate::parse_from_str(value, "%Y-%m-%d").map_err(|e| parse_err(1, format!("trade_date: {e}")))?,
                )
            }
            other => log::debug!("ignoring metadata key '{other}'"),
        }
    }
    let underlying = underlying.ok_or_else(|| parse_err(1, "metadata must declare 'underlying'"))?;
    if !(underlying > 0.0 && underlying.is_finite()) {
        return Err(parse_err(1, format!("underlying must be > 0, got {underlying}")));
    }
    Ok((underlying, rate, date))
}

/// Parses a quote file from any reader.
pub fn parse_quote_file<R: Read>(reader: R) -> Result<RawQuoteFile> {
    let mut lines = BufReader::new(reader).lines();
    let first = lines.next().ok_or_else(|| parse_err(1, "empty file"))??;
    if !first.starts_with("#underlying=") && !first.starts_with("# underlying=") {
        return Err(parse_err(1, "first line must be '#underlying=...'"));
    }
    let (underlying, rate, trade_date) = parse_metadata(&first)?;

    // Remaining lines, with their original numbers, minus comments.
    let mut body = String::new();
    let mut line_no = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim_start().starts_with('#') || line.trim().is_empty() {
            continue;
        }
        body.push_str(&line);
        body.push('\n');
        line_no.push(k + 2);
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(body.as_bytes());
    let header_line = line_no.first().copied().unwrap_or(2);
    let headers = rdr.headers().map_err(|e| parse_err(header_line, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (c_tau, c_mat) = (col("tau"), col("maturity"));
    let c_strike = col("strike").ok_or_else(|| parse_err(header_line, "missing 'strike' column"))?;
    let (c_bid, c_ask, c_mid, c_vol) = (col("bid"), col("ask"), col("mid"), col("volume"));
    if c_tau.is_none() && c_mat.is_none() {
        return Err(parse_err(header_line, "need a 'tau' or 'maturity' column"));
    }
    if c_mat.is_some() && c_tau.is_none() && trade_date.is_none() {
        return Err(parse_err(1, "'maturity' column requires trade_date in the metadata"));
    }

    let mut quotes = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = line_no.get(k + 1).copied().unwrap_or(0);
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        let field = |c: Option<usize>, name: &str| -> Result<Option<f64>> {
            match c.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()) {
                None => Ok(None),
                Some(s) => s.parse::<f64>().map(Some).map_err(|e| parse_err(line, format!("{name}: {e}"))),
            }
        };
        let tau = match field(c_tau, "tau")? {
            Some(t) => t,
            None => {
                let s = c_mat
                    .and_then(|c| rec.get(c))
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| parse_err(line, "missing tau/maturity"))?;
                let mat = NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| parse_err(line, format!("maturity: {e}")))?;
                let trade = trade_date.expect("checked above");
                (mat - trade).num_days() as f64 / 365.0
            }
        };
        let strike = field(Some(c_strike), "strike")?.ok_or_else(|| parse_err(line, "missing strike"))?;
        let (bid, ask, mid, volume) = (field(c_bid, "bid")?, field(c_ask, "ask")?, field(c_mid, "mid")?, field(c_vol, "volume")?);
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(parse_err(line, format!("tau must be > 0, got {tau}")));
        }
        if !(strike > 0.0 && strike.is_finite()) {
            return Err(parse_err(line, format!("strike must be > 0, got {strike}")));
        }
        let price = match (mid, bid, ask) {
            (Some(m), _, _) => m,
            (None, Some(b), Some(a)) => 0.5 * (b + a),
            _ => return Err(parse_err(line, "need mid or both bid and ask")),
        };
        if bid.is_some_and(|b| b > price) || ask.is_some_and(|a| a < price) || matches!((bid, ask), (Some(b), Some(a)) if b > a) {
            return Err(parse_err(line, "require bid <= mid <= ask"));
        }
        if volume.is_some_and(|v| v < 0.0) {
            return Err(parse_err(line, "volume must be >= 0"));
        }
        quotes.push(StrikeQuote { tau, strike, price, bid, ask, volume });
    }
    Ok(RawQuoteFile { underlying, rate, trade_date, quotes })
}

pub fn read_quote_file(path: &Path) -> Result<RawQuoteFile> {
    parse_quote_file(std::fs::File::open(path)?)
}

/// Writes the file format read by [`parse_quote_file`]. `comments` are
/// emitted as `#` lines after the metadata.
pub fn write_quote_file<W: Write>(file: &RawQuoteFile, comments: &[String], mut out: W) -> Result<()> {
    write!(out, "#underlying={};rate={}", fmt17(file.underlying), fmt17(file.rate))?;
    if let Some(d) = file.trade_date {
        write!(out, ";trade_date={}", d.format("%Y-%m-%d"))?;
    }
    writeln!(out)?;
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "tau,strike,bid,ask,mid,volume")?;
    for q in &file.quotes {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt17(q.tau),
            fmt17(q.strike),
            fmt_opt(q.bid),
            fmt_opt(q.ask),
            fmt17(q.price),
            fmt_opt(q.volume)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub obs: ObservationSet,
    /// Kept quotes by strike, in the units of `obs`.
    pub raw: Vec<StrikeQuote>,
    /// Underlying price in the units of `obs` (1 in commodity mode).
    pub s0: f64,
    pub rate: f64,
    pub dropped: usize,
}

/// Locates quotes at `y = ln(K / S0)` and keeps those inside `mesh`.
///
/// In commodity mode prices and strikes are divided by the underlying so that
/// `S0 = 1`.
pub fn ingest(file: &RawQuoteFile, mesh: &MeshSpec, commodity: bool) -> Result<Ingested> {
    let scale = if commodity { file.underlying } else { 1.0 };
    let s0 = file.underlying / scale;
    let raw: Vec<StrikeQuote> = file
        .quotes
        .iter()
        .map(|q| StrikeQuote {
            tau: q.tau,
            strike: q.strike / scale,
            price: q.price / scale,
            bid: q.bid.map(|v| v / scale),
            ask: q.ask.map(|v| v / scale),
            volume: q.volume,
        })
        .collect();
    let (kept, outside): (Vec<StrikeQuote>, Vec<StrikeQuote>) =
        raw.into_iter().partition(|q| mesh.contains(q.tau, (q.strike / s0).ln()));
    if !outside.is_empty() {
        log::warn!("dropped {} of {} quotes outside the mesh", outside.len(), file.quotes.len());
    }
    if kept.is_empty() {
        return Err(Error::NoQuotes("no quote lies inside the mesh".into()));
    }
    let obs = ObservationSet::new(kept.iter().map(|q| q.at(s0)).collect(), s0)?;
    Ok(Ingested { obs, raw: kept, s0, rate: file.rate, dropped: outside.len() })
}

/// Ground-truth local volatility surfaces.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Truth {
    /// `2/5 - 4/25 e^{-tau/2} cos(4 pi y / 5)` for `|y| <= 2/5`, else `2/5`.
    Bump,
    /// [`Truth::Bump`] blended into its outer level by a `tanh` window of the
    /// given width.
    SmoothBump { width: f64 },
    Constant { sigma: f64 },
}

impl Truth {
    pub fn sigma(&self, tau: f64, y: f64) -> f64 {
        let inner = |tau: f64, y: f64| 0.4 - 0.16 * (-0.5 * tau).exp() * (4.0 * std::f64::consts::PI * y / 5.0).cos();
        match *self {
            Truth::Bump => {
                if y.abs() <= 0.4 {
                    inner(tau, y)
                } else {
                    0.4
                }
            }
            Truth::SmoothBump { width } => {
                let w = 0.5 * (1.0 - ((y.abs() - 0.4) / width).tanh());
                w * inner(tau, y) + (1.0 - w) * 0.4
            }
            Truth::Constant { sigma } => sigma,
        }
    }

    pub fn variance_on(&self, mesh: MeshSpec) -> Result<VarianceSurface> {
        VarianceSurface::from_volatility(mesh, |t, y| self.sigma(t, y))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub truth: Truth,
    /// Mesh on which the data are generated.
    pub fine_mesh: MeshSpec,
    /// Mesh used for inversion; the truth is also returned on it.
    pub coarse_mesh: MeshSpec,
    /// Quote locations `(tau, y)` relative to the true underlying.
    pub layout: Vec<(f64, f64)>,
    pub noise_level: f64,
    pub seed: u64,
}

/// Tensor layout `taus x ys`.
pub fn grid_layout(taus: &[f64], ys: &[f64]) -> Vec<(f64, f64)> {
    taus.iter().flat_map(|&t| ys.iter().map(move |&y| (t, y))).collect()
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|k| if k == n - 1 { hi } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 }).collect(),
    }
}

/// Solves on the fine mesh with the true surface, samples at the layout and
/// applies relative noise `u (1 + noise_level eta)`, `eta ~ N(0, 1)`.
pub fn generate_synthetic(spec: &SyntheticSpec, p: &ForwardParams) -> Result<(ObservationSet, VarianceSurface)> {
    if !(spec.noise_level >= 0.0 && spec.noise_level.is_finite()) {
        return Err(Error::InvalidParameter { field: "noise_level", reason: format!("must be >= 0, got {}", spec.noise_level) });
    }
    let (f, c) = (&spec.fine_mesh, &spec.coarse_mesh);
    if !(f.dtau() < c.dtau() && f.dy() < c.dy()) {
        return Err(Error::InvalidMesh {
            field: "fine_mesh",
            reason: format!(
                "steps ({}, {}) must be strictly finer than ({}, {})",
                f.dtau(),
                f.dy(),
                c.dtau(),
                c.dy()
            ),
        });
    }
    let truth_fine = spec.truth.variance_on(*f)?;
    let u = solve_forward(&truth_fine, p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clean: Vec<Quote> = spec.layout.iter().map(|&(t, y)| Quote::new(t, y, 0.0)).collect();
    let obs = ObservationSet::new(clean, p.s0)?;
    let op = build_observation_operator(f, &obs)?;
    let prices = op.apply(&u);
    let quotes = obs
        .quotes()
        .iter()
        .zip(prices)
        .map(|(q, v)| {
            let eta: f64 = StandardNormal.sample(&mut rng);
            Quote { price: v * (1.0 + spec.noise_level * eta), ..*q }
        })
        .collect();
    Ok((ObservationSet::new(quotes, p.s0)?, spec.truth.variance_on(*c)?))
}

/// Strike-located quotes for an observation set located at `s0`.
pub fn to_strike_quotes(obs: &ObservationSet, s0: f64) -> Vec<StrikeQuote> {
    obs.quotes()
        .iter()
        .map(|q| StrikeQuote { tau: q.tau, strike: s0 * q.y.exp(), price: q.price, bid: q.bid, ask: q.ask, volume: q.volume })
        .collect()
}

const COMPLETION_SNAP: f64 = 1e-9;

/// One maturity slice: knots `(y, price)` sorted by `y`, including the
/// boundary anchors.
struct Slice {
    tau: f64,
    knots: Vec<(f64, f64)>,
}

impl Slice {
    fn eval(&self, y: f64) -> f64 {
        let k = &self.knots;
        if let Some(&(_, p)) = k.iter().find(|(ky, _)| (ky - y).abs() <= COMPLETION_SNAP) {
            return p;
        }
        let idx = k.partition_point(|(ky, _)| *ky < y).clamp(1, k.len() - 1);
        let ((y0, p0), (y1, p1)) = (k[idx - 1], k[idx]);
        let t = ((y - y0) / (y1 - y0)).clamp(0.0, 1.0);
        p0 + t * (p1 - p0)
    }
}

/// One pseudo-quote at every mesh node with `tau > 0`.
///
/// Each maturity is interpolated linearly in `y`, anchored by `S0` at `l_y`
/// and 0 at `r_y`; between maturities values are linear in `tau`, starting
/// from the payoff at `tau = 0`, and held constant after the last maturity.
/// The boundary columns carry the Dirichlet values `S0` and 0. No noise is
/// added.
pub fn complete_data(obs: &ObservationSet, mesh: &MeshSpec, s0: f64) -> Result<ObservationSet> {
    let maturities = obs.maturities();
    let mut slices = Vec::with_capacity(maturities.len());
    for &tau in &maturities {
        let mut knots: Vec<(f64, f64)> =
            obs.quotes().iter().filter(|q| (q.tau - tau).abs() <= 1e-12).map(|q| (q.y, q.price)).collect();
        if knots.len() >= 2 {
            knots.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
            if knots[0].0 > mesh.l_y() + COMPLETION_SNAP {
                knots.insert(0, (mesh.l_y(), s0));
            }
            if knots[knots.len() - 1].0 < mesh.r_y() - COMPLETION_SNAP {
                knots.push((mesh.r_y(), 0.0));
            }
            slices.push(Slice { tau, knots });
        }
    }
    if slices.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "completion needs at least 2 maturities with 2 quotes each, found {}",
            slices.len()
        )));
    }
    let mut quotes = Vec::with_capacity((mesh.n_tau() - 1) * mesh.n_y());
    for i in 1..mesh.n_tau() {
        let tau = mesh.tau(i);
        let k = slices.partition_point(|s| s.tau < tau - COMPLETION_SNAP);
        for j in 0..mesh.n_y() {
            let y = mesh.y(j);
            let price = if j == 0 {
                s0
            } else if j == mesh.n_y() - 1 {
                0.0
            } else if k < slices.len() && (slices[k].tau - tau).abs() <= COMPLETION_SNAP {
                slices[k].eval(y)
            } else if k == slices.len() {
                slices[k - 1].eval(y)
            } else {
                let (t0, p0) = if k == 0 { (0.0, payoff(s0, y)) } else { (slices[k - 1].tau, slices[k - 1].eval(y)) };
                let (t1, p1) = (slices[k].tau, slices[k].eval(y));
                p0 + (tau - t0) / (t1 - t0) * (p1 - p0)
            };
            quotes.push(Quote::new(tau, y, price));
        }
    }
    ObservationSet::new(quotes, s0)
}

/// Writes `tau,y,value` rows for a nodal field.
pub fn write_surface_csv<W: Write>(mesh: &MeshSpec, values: &Array2<f64>, comments: &[String], mut out: W) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "tau,y,value")?;
    for i in 0..mesh.n_tau() {
        for j in 0..mesh.n_y() {
            writeln!(out, "{},{},{}", fmt17(mesh.tau(i)), fmt17(mesh.y(j)), fmt17(values[[i, j]]))?;
        }
    }
    Ok(())
}

/// Reads a `tau,y,value` file written by [`write_surface_csv`] on `mesh`.
pub fn read_surface_csv<R: Read>(mesh: &MeshSpec, reader: R) -> Result<VarianceSurface> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let mut values = Array2::from_elem(mesh.shape(), f64::NAN);
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |c: usize| -> Result<f64> {
            rec.get(c)
                .ok_or_else(|| parse_err(k + 2, "expected tau,y,value"))?
                .parse::<f64>()
                .map_err(|e| parse_err(k + 2, e.to_string()))
        };
        let (t, y, v) = (get(0)?, get(1)?, get(2)?);
        let (i, j) = (mesh.nearest_row(t), mesh.nearest_col(y));
        if (mesh.tau(i) - t).abs() > 1e-9 || (mesh.y(j) - y).abs() > 1e-9 {
            return Err(parse_err(k + 2, format!("({t}, {y}) is not a mesh node")));
        }
        values[[i, j]] = v.max(A_FLOOR);
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InsufficientData("surface file does not cover every mesh node".into()));
    }
    VarianceSurface::new(*mesh, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_mesh;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const SAMPLE: &str = "#underlying=2112.7;rate=0.0025;trade_date=2015-05-01
# exported quotes
tau,strike,bid,ask,mid,volume
0.25,2112.7,54.1,55.3,54.7,120
0.25,2200,20.0,21.0,,
0.5,1900,240,242,241,0
";

    #[test]
    fn parses_metadata_and_rows() {
        let f = parse_quote_file(SAMPLE.as_bytes()).unwrap();
        assert_eq!(f.underlying, 2112.7);
        assert_eq!(f.rate, 0.0025);
        assert_eq!(f.trade_date, NaiveDate::from_ymd_opt(2015, 5, 1));
        assert_eq!(f.quotes.len(), 3);
        assert_eq!(f.quotes[1].price, 20.5);
        assert_eq!(f.quotes[1].volume, None);
        let mesh = build_mesh(0.05, 0.05, -5.0, 5.0, 0.5).unwrap();
        let ing = ingest(&f, &mesh, false).unwrap();
        assert_eq!(ing.obs.quotes()[0].y, 0.0);
        let com = ingest(&f, &mesh, true).unwrap();
        assert_eq!(com.s0, 1.0);
        assert_abs_diff_eq!(com.obs.quotes()[0].price, 54.7 / 2112.7, epsilon = 1e-15);
    }

    #[test]
    fn maturity_dates_use_act_365() {
        let text = "#underlying=100;trade_date=2015-01-01\nmaturity,strike,mid\n2015-04-11,100,3.0\n";
        let f = parse_quote_file(text.as_bytes()).unwrap();
        assert_abs_diff_eq!(f.quotes[0].tau, 100.0 / 365.0);
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "#underlying=100\ntau,strike,mid\n0.1,100,1.0\n0.2,abc,1.0\n";
        match parse_quote_file(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let crossed = "#underlying=100\ntau,strike,bid,ask,mid\n0.1,100,2.0,1.0,1.5\n";
        assert!(matches!(parse_quote_file(crossed.as_bytes()), Err(Error::Parse { line: 3, .. })));
        assert!(parse_quote_file("tau,strike\n".as_bytes()).is_err());
    }

    #[test]
    fn all_quotes_outside_is_empty_error() {
        let f = parse_quote_file("#underlying=1\ntau,strike,mid\n2.0,1.0,0.1\n".as_bytes()).unwrap();
        let mesh = build_mesh(0.1, 0.1, -1.0, 1.0, 0.5).unwrap();
        assert!(matches!(ingest(&f, &mesh, false), Err(Error::NoQuotes(_))));
    }

    #[test]
    fn bump_truth_values() {
        assert_abs_diff_eq!(Truth::Bump.sigma(0.0, 0.0), 0.24, epsilon = 1e-15);
        assert_eq!(Truth::Bump.sigma(0.3, 0.45), 0.4);
        assert_eq!(Truth::Bump.sigma(0.3, -2.0), 0.4);
        let s = Truth::SmoothBump { width: 0.05 };
        assert!((s.sigma(0.0, 0.0) - 0.24).abs() < 1e-6);
        assert!((s.sigma(0.0, 1.0) - 0.4).abs() < 1e-10);
    }

    fn spec(noise: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            truth: Truth::Bump,
            fine_mesh: build_mesh(0.01, 0.025, -3.0, 3.0, 0.5).unwrap(),
            coarse_mesh: build_mesh(0.02, 0.05, -3.0, 3.0, 0.5).unwrap(),
            layout: grid_layout(&[0.1, 0.3, 0.5], &linspace(-0.5, 0.5, 11)),
            noise_level: noise,
            seed,
        }
    }

    #[test]
    fn synthetic_is_reproducible_and_noise_free_matches_projection() {
        let p = ForwardParams::new(1.0, 0.0, 0.0).unwrap();
        let (a, _) = generate_synthetic(&spec(0.01, 7), &p).unwrap();
        let (b, _) = generate_synthetic(&spec(0.01, 7), &p).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate_synthetic(&spec(0.01, 8), &p).unwrap();
        assert_ne!(a, c);
        let (clean, truth) = generate_synthetic(&spec(0.0, 7), &p).unwrap();
        let s = spec(0.0, 7);
        let u = solve_forward(&s.truth.variance_on(s.fine_mesh).unwrap(), &p).unwrap();
        let op = build_observation_operator(&s.fine_mesh, &clean).unwrap();
        assert_eq!(clean.prices(), op.apply(&u));
        assert_eq!(truth.mesh(), &s.coarse_mesh);
    }

    #[test]
    fn inverse_crime_is_rejected() {
        let mut s = spec(0.0, 1);
        s.fine_mesh = s.coarse_mesh;
        let p = ForwardParams::new(1.0, 0.0, 0.0).unwrap();
        assert!(matches!(generate_synthetic(&s, &p), Err(Error::InvalidMesh { .. })));
    }

    fn sparse_obs() -> ObservationSet {
        let mut q = Vec::new();
        for (t, base) in [(0.2, 0.1), (0.4, 0.15)] {
            for (k, y) in [-0.5, -0.25, 0.0, 0.25, 0.5].iter().enumerate() {
                q.push(Quote::new(t, *y, base - 0.02 * k as f64));
            }
        }
        ObservationSet::new(q, 1.0).unwrap()
    }

    #[test]
    fn completion_covers_mesh_and_preserves_quotes() {
        let mesh = build_mesh(0.1, 0.125, -2.0, 2.0, 0.5).unwrap();
        let obs = sparse_obs();
        let done = complete_data(&obs, &mesh, 1.0).unwrap();
        assert_eq!(done.len(), (mesh.n_tau() - 1) * mesh.n_y());
        for q in obs.quotes() {
            let hit = done.quotes().iter().find(|c| (c.tau - q.tau).abs() < 1e-12 && (c.y - q.y).abs() < 1e-12).unwrap();
            assert_eq!(hit.price.to_bits(), q.price.to_bits());
        }
        for c in done.quotes() {
            if c.y == mesh.l_y() {
                assert_eq!(c.price, 1.0);
            }
            if c.y == mesh.r_y() {
                assert_eq!(c.price, 0.0);
            }
        }
        // y = -0.125 at tau = 0.2 lies midway between two quotes.
        let mid = done.quotes().iter().find(|c| (c.tau - 0.2).abs() < 1e-12 && (c.y + 0.125).abs() < 1e-12).unwrap();
        assert_abs_diff_eq!(mid.price, 0.5 * (0.1 - 0.02 + 0.1 - 0.04), epsilon = 1e-15);
        // tau = 0.1: halfway between payoff and the first maturity.
        let early = done.quotes().iter().find(|c| (c.tau - 0.1).abs() < 1e-12 && c.y == 0.0).unwrap();
        assert_abs_diff_eq!(early.price, 0.5 * (0.0 + 0.06), epsilon = 1e-15);
        // after the last maturity values are held.
        let late = done.quotes().iter().find(|c| (c.tau - 0.5).abs() < 1e-12 && c.y == 0.0).unwrap();
        assert_abs_diff_eq!(late.price, 0.11, epsilon = 1e-15);
    }

    #[test]
    fn completion_needs_two_maturities() {
        let q = vec![Quote::new(0.2, 0.0, 0.1), Quote::new(0.2, 0.1, 0.05), Quote::new(0.4, 0.0, 0.1)];
        let mesh = build_mesh(0.1, 0.125, -2.0, 2.0, 0.5).unwrap();
        assert!(matches!(complete_data(&ObservationSet::new(q, 1.0).unwrap(), &mesh, 1.0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn surface_file_round_trip() {
        let mesh = build_mesh(0.1, 0.25, -1.0, 1.0, 0.3).unwrap();
        let a = Truth::Bump.variance_on(mesh).unwrap();
        let mut buf = Vec::new();
        write_surface_csv(&mesh, a.values(), &["seed = 1".into()], &mut buf).unwrap();
        let back = read_surface_csv(&mesh, buf.as_slice()).unwrap();
        assert_eq!(back, a);
    }

    fn opt_price() -> impl Strategy<Value = Option<f64>> {
        prop_oneof![Just(None), (0.0f64..10.0).prop_map(Some)]
    }

    proptest! {
        #[test]
        fn emit_then_parse_is_identity(
            rows in proptest::collection::vec((1e-3f64..5.0, 1e-2f64..5e3, 0.0f64..100.0, opt_price(), opt_price(), opt_price()), 1..30),
            underlying in 1e-3f64..1e4,
            rate in -0.05f64..0.1,
        ) {
            let quotes = rows.iter().map(|&(tau, strike, price, db, da, vol)| StrikeQuote {
                tau, strike, price,
                bid: db.map(|d| price - d.min(price)),
                ask: da.map(|d| price + d),
                volume: vol,
            }).collect();
            let file = RawQuoteFile { underlying, rate, trade_date: NaiveDate::from_ymd_opt(2020, 2, 29), quotes };
            let mut buf = Vec::new();
            write_quote_file(&file, &["note".into()], &mut buf).unwrap();
            let back = parse_quote_file(buf.as_slice()).unwrap();
            prop_assert_eq!(back, file);
        }
    }
}
