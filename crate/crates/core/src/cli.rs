//! Configuration and commands of the `locvol` binary.
//!
//! The configuration is TOML; every section is optional and defaults are
//! listed on the structs below. Every output file starts with `#` lines that
//! echo the effective configuration, including the seed.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{
    complete_data, fmt17, generate_synthetic, grid_layout, ingest, linspace, read_quote_file, to_strike_quotes,
    write_quote_file, write_surface_csv, RawQuoteFile, SyntheticSpec, Truth,
};
use crate::enkf::{run_enkf, write_enkf_history_csv, EnkfOptions, EnkfPriors};
use crate::error::{Error, Result};
use crate::forward::{solve_forward, ForwardParams};
use crate::mesh::{build_mesh, MeshSpec, ObservationOperator, ObservationSet, VarianceSurface};
use crate::metrics::{implied_misfit, normalized_distance, MisfitReport, Region, StrikeWindow, VolConvention, REPORT_HEADER};
use crate::s0::{calibrate_with_s0_using, remap_observations, write_s0_history_csv, S0Config, StrikeQuote};
use crate::tikhonov::{
    calibrate, write_history_csv, CalibrationResult, DiscrepancyConvention, PenaltyWeights, TikhonovOptions,
    WingRule, COMPLETED_CUTOFF, WING_FLOOR,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub dtau: f64,
    pub dy: f64,
    pub l_y: f64,
    pub r_y: f64,
    pub t_max: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { dtau: 0.01, dy: 0.05, l_y: -5.0, r_y: 5.0, t_max: 0.5 }
    }
}

impl MeshConfig {
    pub fn build(&self) -> Result<MeshSpec> {
        build_mesh(self.dtau, self.dy, self.l_y, self.r_y, self.t_max)
    }
}

/// Variance surface used by the `forward` command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurfaceConfig {
    /// Constant local variance `a`, possibly zero.
    Variance { a: f64 },
    Truth { truth: Truth },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardConfig {
    /// Quoted (observed) underlying price.
    pub s0: f64,
    pub b: f64,
    pub r: f64,
    pub surface: SurfaceConfig,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self { s0: 1.0, b: 0.0, r: 0.0, surface: SurfaceConfig::Truth { truth: Truth::Constant { sigma: 0.4 } } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub alpha5: f64,
    pub a0: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { alpha0: 1e5, alpha1: 1e2, alpha2: 1e4, alpha3: 1.0, alpha4: 1e5, alpha5: 1e5, a0: 0.45f64.powi(2) / 2.0 }
    }
}

impl PenaltyConfig {
    pub fn weights(&self) -> Result<PenaltyWeights> {
        PenaltyWeights::new(self.alpha0, self.alpha1, self.alpha2, self.alpha3, self.a0).map_err(config_err("penalty"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    #[default]
    Tikhonov,
    Enkf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    #[default]
    Scarce,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: MethodKind,
    pub data_mode: DataMode,
    pub s0_adjust: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TikhonovConfig {
    pub max_iters: usize,
    pub initial_step: f64,
    pub rel_tol: f64,
    pub discrepancy_convention: DiscrepancyConvention,
    /// Apply the wing rule matching the data mode.
    pub wings: bool,
    pub precondition: bool,
    pub wing_floor: f64,
    pub completed_cutoff: f64,
}

impl Default for TikhonovConfig {
    fn default() -> Self {
        let d = TikhonovOptions::default();
        Self {
            max_iters: d.max_iters,
            initial_step: d.initial_step,
            rel_tol: d.rel_tol,
            discrepancy_convention: d.convention,
            wings: true,
            precondition: d.precondition,
            wing_floor: WING_FLOOR,
            completed_cutoff: COMPLETED_CUTOFF,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnkfConfig {
    pub ensemble_size: usize,
    pub max_iters: usize,
    pub residual_tol: f64,
    pub perturb: bool,
    pub init_std: f64,
    pub init_corr_len: f64,
}

impl Default for EnkfConfig {
    fn default() -> Self {
        let d = EnkfOptions::default();
        Self {
            ensemble_size: d.ensemble_size,
            max_iters: d.max_iters,
            residual_tol: d.residual_tol,
            perturb: d.perturb,
            init_std: 0.01,
            init_corr_len: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct S0Section {
    pub outer_iters: usize,
    /// Search interval; defaults to `[s0 / 2, 2 s0]`.
    pub bounds: Option<[f64; 2]>,
}

impl Default for S0Section {
    fn default() -> Self {
        Self { outer_iters: 8, bounds: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub truth: Truth,
    /// True underlying used to generate the quotes; defaults to `forward.s0`.
    pub true_s0: Option<f64>,
    pub fine_dtau: f64,
    pub fine_dy: f64,
    pub taus: Vec<f64>,
    /// Quote log-moneyness relative to the true underlying.
    pub ys: Vec<f64>,
    pub noise_level: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            truth: Truth::Bump,
            true_s0: None,
            fine_dtau: 0.005,
            fine_dy: 0.025,
            taus: linspace(0.1, 0.5, 5),
            ys: linspace(-0.75, 0.75, 31),
            noise_level: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub commodity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Strike window in currency.
    pub strike_window: Option<[f64; 2]>,
    /// Log-moneyness window, used when no strike window is given.
    pub y_window: Option<[f64; 2]>,
    /// Compare surfaces on the whole mesh instead of the data hull.
    pub full_mesh_distance: bool,
}

impl MetricsConfig {
    fn window(&self) -> StrikeWindow {
        match (self.strike_window, self.y_window) {
            (Some([lo, hi]), _) => StrikeWindow::Strike(lo, hi),
            (None, Some([lo, hi])) => StrikeWindow::LogMoneyness(lo, hi),
            _ => StrikeWindow::All,
        }
    }
}

/// Overrides applied by `compare` for one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct VariantConfig {
    pub name: String,
    pub kind: Option<MethodKind>,
    pub data_mode: Option<DataMode>,
    pub s0_adjust: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mesh: MeshConfig,
    pub forward: ForwardConfig,
    pub penalty: PenaltyConfig,
    pub method: MethodConfig,
    pub tikhonov: TikhonovConfig,
    pub enkf: EnkfConfig,
    pub s0: S0Section,
    pub synthetic: Option<SyntheticConfig>,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
    pub variants: Vec<VariantConfig>,
}

fn config_err(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::InvalidParameter { field, reason } => Error::Config { field: format!("{section}.{field}"), reason },
        Error::InvalidMesh { field, reason } => Error::Config { field: format!("{section}.{field}"), reason },
        other => other,
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config { field: "config".into(), reason: e.message().to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// The effective configuration as comment lines.
    pub fn echo_lines(&self) -> Vec<String> {
        let mut lines = vec![format!("seed = {}", self.seed)];
        lines.extend(self.to_toml().lines().filter(|l| !l.trim().is_empty()).map(|l| format!("config: {l}")));
        lines
    }

    pub fn forward_params(&self) -> Result<ForwardParams> {
        ForwardParams::new(self.forward.s0, self.forward.b, self.forward.r).map_err(config_err("forward"))
    }

    fn check_source(&self) -> Result<()> {
        match (&self.data.path, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::Config {
                field: "data.path".into(),
                reason: "give either data.path or [synthetic], not both".into(),
            }),
            (None, None) => Err(Error::Config { field: "data.path".into(), reason: "need data.path or [synthetic]".into() }),
            _ => Ok(()),
        }
    }

    /// The configuration with a variant's overrides applied.
    pub fn with_variant(&self, v: &VariantConfig) -> Self {
        let mut c = self.clone();
        if let Some(k) = v.kind {
            c.method.kind = k;
        }
        if let Some(d) = v.data_mode {
            c.method.data_mode = d;
        }
        if let Some(s) = v.s0_adjust {
            c.method.s0_adjust = s;
        }
        c.variants.clear();
        c
    }
}

/// Quotes and reference information a calibration starts from.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Quotes by strike.
    pub raw: Vec<StrikeQuote>,
    /// Quoted underlying.
    pub s0_observed: f64,
    pub truth: Option<VarianceSurface>,
    /// True underlying, when known.
    pub s0_true: Option<f64>,
    pub rate: f64,
}

/// Builds the quotes from the synthetic section or the data file.
pub fn load_dataset(cfg: &RunConfig, mesh: &MeshSpec) -> Result<Dataset> {
    cfg.check_source()?;
    if let Some(path) = &cfg.data.path {
        let file = read_quote_file(path)?;
        let ing = ingest(&file, mesh, cfg.data.commodity)?;
        return Ok(Dataset { raw: ing.raw, s0_observed: ing.s0, truth: None, s0_true: None, rate: ing.rate });
    }
    let syn = cfg.synthetic.as_ref().expect("checked");
    let (obs, truth, s0_true) = synthetic_observations(cfg, syn, mesh)?;
    Ok(Dataset {
        raw: to_strike_quotes(&obs, s0_true),
        s0_observed: cfg.forward.s0,
        truth: Some(truth),
        s0_true: Some(s0_true),
        rate: cfg.forward.r,
    })
}

fn synthetic_observations(
    cfg: &RunConfig,
    syn: &SyntheticConfig,
    mesh: &MeshSpec,
) -> Result<(ObservationSet, VarianceSurface, f64)> {
    let s0_true = syn.true_s0.unwrap_or(cfg.forward.s0);
    let fine = build_mesh(syn.fine_dtau, syn.fine_dy, mesh.l_y(), mesh.r_y(), mesh.t_max()).map_err(config_err("synthetic"))?;
    let spec = SyntheticSpec {
        truth: syn.truth,
        fine_mesh: fine,
        coarse_mesh: *mesh,
        layout: grid_layout(&syn.taus, &syn.ys),
        noise_level: syn.noise_level,
        seed: cfg.seed,
    };
    let p = cfg.forward_params()?.with_s0(s0_true);
    let (obs, truth) = generate_synthetic(&spec, &p).map_err(config_err("synthetic"))?;
    Ok((obs, truth, s0_true))
}

/// Everything a calibration run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub surface: VarianceSurface,
    pub s0: f64,
    pub report: MisfitReport,
    pub distance: Option<f64>,
    pub tikhonov: Option<CalibrationResult>,
    pub enkf: Option<crate::enkf::EnkfResult>,
    pub s0_result: Option<crate::s0::S0Result>,
    /// Original quotes located at the final `s0`.
    pub obs: ObservationSet,
}

enum StageHistory {
    Tikhonov(CalibrationResult),
    Enkf(crate::enkf::EnkfResult),
}

/// One surface stage for quotes located at a given `s0`.
fn surface_stage(
    cfg: &RunConfig,
    warm: &VarianceSurface,
    p: &ForwardParams,
    op: &ObservationOperator,
    obs: &ObservationSet,
    maturities: &[f64],
) -> Result<(VarianceSurface, StageHistory)> {
    let mesh = *op.mesh();
    let w = cfg.penalty.weights()?;
    let (obs, op) = match cfg.method.data_mode {
        DataMode::Scarce => (obs.clone(), op.clone()),
        DataMode::Completed => {
            let done = complete_data(obs, &mesh, p.s0)?;
            let op = crate::mesh::build_observation_operator(&mesh, &done)?;
            (done, op)
        }
    };
    match cfg.method.kind {
        MethodKind::Tikhonov => {
            let t = &cfg.tikhonov;
            let wing = match (t.wings, cfg.method.data_mode) {
                (false, _) => WingRule::None,
                (true, DataMode::Scarce) => WingRule::scarce(&obs, &mesh, t.wing_floor),
                (true, DataMode::Completed) => WingRule::completed(maturities, &mesh, t.completed_cutoff),
            };
            let opts = TikhonovOptions {
                max_iters: t.max_iters,
                initial_step: t.initial_step,
                rel_tol: t.rel_tol,
                convention: t.discrepancy_convention,
                wing,
                precondition: t.precondition,
                ..TikhonovOptions::default()
            };
            let res = calibrate(warm, p, &op, &obs, &w, &opts)?;
            Ok((res.surface.clone(), StageHistory::Tikhonov(res)))
        }
        MethodKind::Enkf => {
            let e = &cfg.enkf;
            let priors = EnkfPriors::from_weights(&w, &mesh, e.init_std, e.init_corr_len).map_err(config_err("enkf"))?;
            let opts = EnkfOptions {
                ensemble_size: e.ensemble_size,
                max_iters: e.max_iters,
                residual_tol: e.residual_tol,
                seed: cfg.seed,
                perturb: e.perturb,
            };
            let map = crate::tikhonov::DupireMap::new(*p, op);
            let res = run_enkf(&map, &obs.prices(), &priors, &opts)?;
            Ok((res.surface.clone(), StageHistory::Enkf(res)))
        }
    }
}

/// Runs one calibration as configured.
pub fn run_calibration(cfg: &RunConfig) -> Result<RunOutcome> {
    let mesh = cfg.mesh.build().map_err(config_err("mesh"))?;
    let data = load_dataset(cfg, &mesh)?;
    calibrate_dataset(cfg, &mesh, &data)
}

/// Runs one calibration on an already built data set.
pub fn calibrate_dataset(cfg: &RunConfig, mesh: &MeshSpec, data: &Dataset) -> Result<RunOutcome> {
    let p = ForwardParams::new(data.s0_observed, cfg.forward.b, data.rate).map_err(config_err("forward"))?;
    let w = cfg.penalty.weights()?;
    let a_init = VarianceSurface::constant(*mesh, w.a0_prior)?;
    let original_maturities: Vec<f64> = {
        let mut m: Vec<f64> = data.raw.iter().map(|q| q.tau).collect();
        m.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        m.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
        m
    };
    let last = RefCell::new(None);
    let stage = |warm: &VarianceSurface, pk: &ForwardParams, op: &ObservationOperator, obs: &ObservationSet| {
        let (surface, hist) = surface_stage(cfg, warm, pk, op, obs, &original_maturities)?;
        *last.borrow_mut() = Some(hist);
        Ok(surface)
    };

    let region_for = |obs: &ObservationSet| {
        if cfg.metrics.full_mesh_distance {
            Region::Full
        } else {
            Region::hull_of(obs)
        }
    };

    let reference = match (&data.truth, data.s0_true) {
        (Some(t), Some(st)) => Some((t, region_for(&remap_observations(&data.raw, st, mesh)?.0))),
        _ => None,
    };

    let (surface, s0, s0_result) = if cfg.method.s0_adjust {
        let s = &cfg.s0;
        let bounds = s.bounds.map(|[lo, hi]| (lo, hi)).unwrap_or((0.5 * data.s0_observed, 2.0 * data.s0_observed));
        let s0cfg = S0Config::with_bounds(data.s0_observed, cfg.penalty.alpha4, cfg.penalty.alpha5, s.outer_iters, bounds)
            .map_err(config_err("s0"))?;
        let res = calibrate_with_s0_using(
            &data.raw,
            &s0cfg,
            &p,
            w.alpha0,
            &a_init,
            stage,
            reference.as_ref().map(|(t, r)| (*t, r)),
        )?;
        (res.surface.clone(), res.final_s0, Some(res))
    } else {
        let (obs, op) = remap_observations(&data.raw, data.s0_observed, mesh)?;
        (stage(&a_init, &p, &op, &obs)?, data.s0_observed, None)
    };

    let (obs, _) = remap_observations(&data.raw, s0, mesh)?;
    let pf = p.with_s0(s0);
    let report = implied_misfit(&surface, &obs, &pf, cfg.metrics.window(), VolConvention::from_params(&pf))?;
    let distance = match &reference {
        Some((t, region)) => Some(normalized_distance(&surface, t, region)?),
        None => None,
    };
    let (tikhonov, enkf) = match last.into_inner() {
        Some(StageHistory::Tikhonov(r)) => (Some(r), None),
        Some(StageHistory::Enkf(r)) => (None, Some(r)),
        None => (None, None),
    };
    Ok(RunOutcome { surface, s0, report, distance, tikhonov, enkf, s0_result, obs })
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(out)?;
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn comment_header<W: Write>(out: &mut W, cfg: &RunConfig) -> Result<()> {
    for l in cfg.echo_lines() {
        writeln!(out, "# {l}")?;
    }
    Ok(())
}

/// Writes the price surface for the configured variance.
pub fn cmd_forward(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mesh = cfg.mesh.build().map_err(config_err("mesh"))?;
    let a = match cfg.forward.surface {
        SurfaceConfig::Variance { a } => {
            VarianceSurface::new_unclamped(mesh, Array2::from_elem(mesh.shape(), a)).map_err(config_err("forward.surface"))?
        }
        SurfaceConfig::Truth { truth } => truth.variance_on(mesh)?,
    };
    let u = solve_forward(&a, &cfg.forward_params()?)?;
    let mut f = create(out, "prices.csv")?;
    write_surface_csv(&mesh, u.values(), &cfg.echo_lines(), &mut f)?;
    f.flush()?;
    Ok(())
}

/// Calibrates and writes the surface, histories and metrics.
pub fn cmd_calibrate(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let res = run_calibration(cfg)?;
    let echo = cfg.echo_lines();
    let mesh = *res.surface.mesh();

    let mut f = create(out, "surface.csv")?;
    write_surface_csv(&mesh, res.surface.values(), &echo, &mut f)?;
    f.flush()?;
    let mut f = create(out, "volatility.csv")?;
    write_surface_csv(&mesh, &res.surface.volatility(), &echo, &mut f)?;
    f.flush()?;

    let mut f = create(out, "history.csv")?;
    comment_header(&mut f, cfg)?;
    match (&res.tikhonov, &res.enkf) {
        (Some(t), _) => write_history_csv(t, &mut f)?,
        (_, Some(e)) => write_enkf_history_csv(e, &mut f)?,
        _ => {}
    }
    f.flush()?;

    if let Some(s) = &res.s0_result {
        let mut f = create(out, "s0_history.csv")?;
        comment_header(&mut f, cfg)?;
        write_s0_history_csv(s, &mut f)?;
        f.flush()?;
    }

    let mut f = create(out, "metrics.csv")?;
    comment_header(&mut f, cfg)?;
    writeln!(f, "{REPORT_HEADER},final_s0,distance")?;
    writeln!(f, "{},{},{}", res.report.csv_row(), fmt17(res.s0), res.distance.map(fmt17).unwrap_or_default())?;
    f.flush()?;
    println!("{}", res.report);
    if let Some(d) = res.distance {
        println!("{:<20}{:>14.6}", "distance", d);
    }
    println!("{:<20}{:>14.6}", "s0", res.s0);
    Ok(res)
}

/// Runs every variant and writes a joined metrics table plus volatility
/// slices at each data maturity.
pub fn cmd_compare(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.variants.len() < 2 {
        return Err(Error::Config { field: "variants".into(), reason: format!("need at least 2, got {}", cfg.variants.len()) });
    }
    let mut table = create(out, "compare.csv")?;
    comment_header(&mut table, cfg)?;
    writeln!(table, "variant,method,data_mode,s0_adjust,status,{REPORT_HEADER},final_s0,distance")?;
    let mut slices = create(out, "slices.csv")?;
    comment_header(&mut slices, cfg)?;
    writeln!(slices, "variant,tau,y,sigma")?;
    for v in &cfg.variants {
        let vc = cfg.with_variant(v);
        let m = &vc.method;
        let kind = match m.kind {
            MethodKind::Tikhonov => "tikhonov",
            MethodKind::Enkf => "enkf",
        };
        let mode = match m.data_mode {
            DataMode::Scarce => "scarce",
            DataMode::Completed => "completed",
        };
        match run_calibration(&vc) {
            Ok(res) => {
                writeln!(
                    table,
                    "{},{kind},{mode},{},ok,{},{},{}",
                    v.name,
                    m.s0_adjust,
                    res.report.csv_row(),
                    fmt17(res.s0),
                    res.distance.map(fmt17).unwrap_or_default()
                )?;
                let mesh = res.surface.mesh();
                let vol = res.surface.volatility();
                for tau in res.obs.maturities() {
                    let i = mesh.nearest_row(tau);
                    for j in 0..mesh.n_y() {
                        writeln!(slices, "{},{},{},{}", v.name, fmt17(mesh.tau(i)), fmt17(mesh.y(j)), fmt17(vol[[i, j]]))?;
                    }
                }
            }
            Err(e) => {
                log::error!("variant {}: {e}", v.name);
                let blanks = ",".repeat(REPORT_HEADER.matches(',').count() + 3);
                writeln!(table, "{},{kind},{mode},{},error:{}{blanks}", v.name, m.s0_adjust, e.kind())?;
            }
        }
    }
    table.flush()?;
    slices.flush()?;
    Ok(())
}

/// Writes the synthetic quote file and the true surface on the inversion
/// mesh.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mesh = cfg.mesh.build().map_err(config_err("mesh"))?;
    let syn = cfg.synthetic.as_ref().ok_or_else(|| Error::Config { field: "synthetic".into(), reason: "section missing".into() })?;
    let (obs, truth, s0_true) = synthetic_observations(cfg, syn, &mesh)?;
    let file = RawQuoteFile { underlying: cfg.forward.s0, rate: cfg.forward.r, trade_date: None, quotes: to_strike_quotes(&obs, s0_true) };
    let mut f = create(out, "quotes.csv")?;
    write_quote_file(&file, &cfg.echo_lines(), &mut f)?;
    f.flush()?;
    let mut f = create(out, "truth.csv")?;
    write_surface_csv(&mesh, truth.values(), &cfg.echo_lines(), &mut f)?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "locvol", version, about = "Local volatility calibration from option quotes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the forward problem for the configured surface.
    Forward(CommonArgs),
    /// Calibrate a surface to quotes.
    Calibrate(CommonArgs),
    /// Run the configured variants side by side.
    Compare(CommonArgs),
    /// Generate a synthetic quote file.
    Synth(CommonArgs),
}

/// Executes a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let (args, which) = match &cli.command {
        Command::Forward(a) => (a, 0),
        Command::Calibrate(a) => (a, 1),
        Command::Compare(a) => (a, 2),
        Command::Synth(a) => (a, 3),
    };
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cfg.data.path {
        if p.is_relative() {
            let base = args.config.parent().unwrap_or(Path::new("."));
            cfg.data.path = Some(base.join(p));
        }
    }
    match which {
        0 => cmd_forward(&cfg, &args.out),
        1 => cmd_calibrate(&cfg, &args.out).map(|_| ()),
        2 => cmd_compare(&cfg, &args.out),
        _ => cmd_synth(&cfg, &args.out),
    }
}

/// Machine-parsable failure line.
pub fn error_line(e: &Error) -> String {
    format!("error: kind={} msg={:?}", e.kind(), e.to_string())
}
