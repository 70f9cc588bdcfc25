//! Discretization geometry, surface containers and the bilinear observation
//! operator.
//!
//! Nodes are indexed `(i, j)` with `tau_i = i * dtau` for `i in 0..=m_tau + 1`
//! and `y_j = l_y + j * dy` for `j in 0..=m_y + 1`. Surfaces are stored
//! row-major as `values[[i, j]]`, one row per time level.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Lower bound applied to every local-variance value.
pub const A_FLOOR: f64 = 1e-6;

/// Relative slack when deciding whether a coordinate sits on a mesh line.
const SNAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshSpec {
    dtau: f64,
    dy: f64,
    l_y: f64,
    r_y: f64,
    t_max: f64,
    m_tau: usize,
    m_y: usize,
}

fn check_finite(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidMesh { field, reason: format!("must be finite, got {v}") })
    }
}

/// Number of steps needed to cover `length` with steps no larger than `step`.
fn step_count(length: f64, step: f64) -> usize {
    let raw = length / step;
    let rounded = raw.round();
    if (raw - rounded).abs() <= SNAP_TOL * rounded.max(1.0) {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

/// Builds a uniform mesh covering `[0, t_max] x [l_y, r_y]`.
///
/// Step counts are rounded up so the realized steps never exceed the requested
/// ones, then the exact steps are recomputed from the counts. At least one
/// interior space node is always kept.
pub fn build_mesh(dtau: f64, dy: f64, l_y: f64, r_y: f64, t_max: f64) -> Result<MeshSpec> {
    check_finite("dtau", dtau)?;
    check_finite("dy", dy)?;
    check_finite("l_y", l_y)?;
    check_finite("r_y", r_y)?;
    check_finite("t_max", t_max)?;
    if dtau <= 0.0 {
        return Err(Error::InvalidMesh { field: "dtau", reason: format!("must be > 0, got {dtau}") });
    }
    if dy <= 0.0 {
        return Err(Error::InvalidMesh { field: "dy", reason: format!("must be > 0, got {dy}") });
    }
    if l_y >= 0.0 {
        return Err(Error::InvalidMesh { field: "l_y", reason: format!("must be < 0, got {l_y}") });
    }
    if r_y <= 0.0 {
        return Err(Error::InvalidMesh { field: "r_y", reason: format!("must be > 0, got {r_y}") });
    }
    if t_max <= 0.0 {
        return Err(Error::InvalidMesh {
            field: "t_max",
            reason: format!("must be > 0, got {t_max}"),
        });
    }
    let tau_steps = step_count(t_max, dtau).max(1);
    let y_steps = step_count(r_y - l_y, dy).max(2);
    Ok(MeshSpec {
        dtau: t_max / tau_steps as f64,
        dy: (r_y - l_y) / y_steps as f64,
        l_y,
        r_y,
        t_max,
        m_tau: tau_steps - 1,
        m_y: y_steps - 1,
    })
}

impl MeshSpec {
    pub fn dtau(&self) -> f64 {
        self.dtau
    }
    pub fn dy(&self) -> f64 {
        self.dy
    }
    pub fn l_y(&self) -> f64 {
        self.l_y
    }
    pub fn r_y(&self) -> f64 {
        self.r_y
    }
    pub fn t_max(&self) -> f64 {
        self.t_max
    }
    /// Interior time levels `M_tau`.
    pub fn m_tau(&self) -> usize {
        self.m_tau
    }
    /// Interior space nodes `M_y`.
    pub fn m_y(&self) -> usize {
        self.m_y
    }
    /// Number of time levels including the initial row.
    pub fn n_tau(&self) -> usize {
        self.m_tau + 2
    }
    /// Number of space nodes including both boundaries.
    pub fn n_y(&self) -> usize {
        self.m_y + 2
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.n_tau(), self.n_y())
    }
    pub fn node_count(&self) -> usize {
        self.n_tau() * self.n_y()
    }
    pub fn tau(&self, i: usize) -> f64 {
        if i == self.m_tau + 1 {
            self.t_max
        } else {
            i as f64 * self.dtau
        }
    }
    pub fn y(&self, j: usize) -> f64 {
        if j == self.m_y + 1 {
            self.r_y
        } else {
            self.l_y + j as f64 * self.dy
        }
    }
    pub fn taus(&self) -> Vec<f64> {
        (0..self.n_tau()).map(|i| self.tau(i)).collect()
    }
    pub fn ys(&self) -> Vec<f64> {
        (0..self.n_y()).map(|j| self.y(j)).collect()
    }
    pub fn contains(&self, tau: f64, y: f64) -> bool {
        let tol_t = SNAP_TOL * self.t_max.max(1.0);
        let tol_y = SNAP_TOL * (self.r_y - self.l_y).max(1.0);
        tau >= -tol_t && tau <= self.t_max + tol_t && y >= self.l_y - tol_y && y <= self.r_y + tol_y
    }
    /// Index of the time level closest to `tau`.
    pub fn nearest_row(&self, tau: f64) -> usize {
        let i = (tau / self.dtau).round();
        (i.max(0.0) as usize).min(self.n_tau() - 1)
    }
    /// Index of the space node closest to `y`.
    pub fn nearest_col(&self, y: f64) -> usize {
        let j = ((y - self.l_y) / self.dy).round();
        (j.max(0.0) as usize).min(self.n_y() - 1)
    }
    /// Flat row-major node index.
    pub fn flat(&self, i: usize, j: usize) -> usize {
        i * self.n_y() + j
    }

    /// Cell containing a coordinate: base index and fractional offset in
    /// `[0, 1)`, with near-integer offsets snapped onto the node.
    fn locate(pos: f64, n_cells: usize) -> (usize, f64) {
        let nearest = pos.round();
        if (pos - nearest).abs() <= SNAP_TOL * nearest.abs().max(1.0) {
            let k = (nearest.max(0.0) as usize).min(n_cells);
            return (k, 0.0);
        }
        let base = (pos.floor().max(0.0) as usize).min(n_cells - 1);
        (base, (pos - base as f64).clamp(0.0, 1.0))
    }
}

/// Nodal local variance `a = sigma^2 / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSurface {
    mesh: MeshSpec,
    values: Array2<f64>,
}

impl VarianceSurface {
    /// Wraps nodal values, clamping every entry at [`A_FLOOR`].
    pub fn new(mesh: MeshSpec, mut values: Array2<f64>) -> Result<Self> {
        Self::check(&mesh, &values)?;
        values.mapv_inplace(|v| v.max(A_FLOOR));
        Ok(Self { mesh, values })
    }

    /// Wraps nodal values without applying the floor. Values must still be
    /// finite and non-negative; used for degenerate diagnostics such as the
    /// zero-variance surface.
    pub fn new_unclamped(mesh: MeshSpec, values: Array2<f64>) -> Result<Self> {
        Self::check(&mesh, &values)?;
        if let Some(v) = values.iter().find(|v| **v < 0.0) {
            return Err(Error::InvalidParameter {
                field: "values",
                reason: format!("local variance must be >= 0, got {v}"),
            });
        }
        Ok(Self { mesh, values })
    }

    fn check(mesh: &MeshSpec, values: &Array2<f64>) -> Result<()> {
        if values.dim() != mesh.shape() {
            return Err(Error::ShapeMismatch(format!(
                "surface values {:?} vs mesh {:?}",
                values.dim(),
                mesh.shape()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                field: "values",
                reason: format!("local variance must be finite, got {v}"),
            });
        }
        Ok(())
    }

    pub fn constant(mesh: MeshSpec, a: f64) -> Result<Self> {
        Self::new(mesh, Array2::from_elem(mesh.shape(), a))
    }

    /// Samples `sigma(tau, y)` at every node and stores `sigma^2 / 2`.
    pub fn from_volatility<F: Fn(f64, f64) -> f64>(mesh: MeshSpec, sigma: F) -> Result<Self> {
        let values = Array2::from_shape_fn(mesh.shape(), |(i, j)| {
            let s = sigma(mesh.tau(i), mesh.y(j));
            0.5 * s * s
        });
        Self::new(mesh, values)
    }

    pub fn mesh(&self) -> &MeshSpec {
        &self.mesh
    }
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
    pub fn volatility(&self) -> Array2<f64> {
        self.values.mapv(|a| (2.0 * a).sqrt())
    }
}

/// Call prices `u[[i, j]]` on the mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSurface {
    pub(crate) mesh: MeshSpec,
    pub(crate) values: Array2<f64>,
}

impl PriceSurface {
    pub fn mesh(&self) -> &MeshSpec {
        &self.mesh
    }
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
    /// Bilinear interpolation at an arbitrary point of the mesh rectangle.
    pub fn interpolate(&self, tau: f64, y: f64) -> Result<f64> {
        let row = ObservationOperator::weights_at(&self.mesh, tau, y)
            .ok_or(Error::QuoteOutsideMesh { index: 0, tau, y })?;
        let flat = self.values.as_slice().expect("standard layout");
        Ok(row.iter().map(|&(k, w)| w * flat[k]).sum())
    }
}

/// One option quote in `(tau, y)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quote {
    pub tau: f64,
    pub y: f64,
    pub price: f64,
    pub bid: Option<f64>,
    pub ask: Option<f64>,
    pub volume: Option<f64>,
}

impl Quote {
    pub fn new(tau: f64, y: f64, price: f64) -> Self {
        Self { tau, y, price, bid: None, ask: None, volume: None }
    }
    /// Bid/ask midpoint when both sides are known, otherwise the price.
    pub fn mid(&self) -> f64 {
        match (self.bid, self.ask) {
            (Some(b), Some(a)) => 0.5 * (b + a),
            _ => self.price,
        }
    }
}

/// Observed quotes together with the underlying level used for their
/// log-moneyness coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    quotes: Vec<Quote>,
    s0_ref: f64,
}

impl ObservationSet {
    pub fn new(quotes: Vec<Quote>, s0_ref: f64) -> Result<Self> {
        if !(s0_ref > 0.0 && s0_ref.is_finite()) {
            return Err(Error::InvalidParameter {
                field: "s0_ref",
                reason: format!("must be positive, got {s0_ref}"),
            });
        }
        if quotes.is_empty() {
            return Err(Error::NoQuotes("observation set is empty".into()));
        }
        for q in &quotes {
            if !(q.tau > 0.0) || !q.tau.is_finite() || !q.y.is_finite() || !q.price.is_finite() {
                return Err(Error::InvalidParameter {
                    field: "quotes",
                    reason: format!("invalid quote {q:?}"),
                });
            }
        }
        let mut keys: Vec<(f64, f64)> = quotes.iter().map(|q| (q.tau, q.y)).collect();
        keys.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        for w in keys.windows(2) {
            if (w[0].0 - w[1].0).abs() <= 1e-12 && (w[0].1 - w[1].1).abs() <= 1e-12 {
                return Err(Error::DuplicateQuote { tau: w[1].0, y: w[1].1 });
            }
        }
        Ok(Self { quotes, s0_ref })
    }

    pub fn quotes(&self) -> &[Quote] {
        &self.quotes
    }
    pub fn s0_ref(&self) -> f64 {
        self.s0_ref
    }
    pub fn len(&self) -> usize {
        self.quotes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.quotes.is_empty()
    }
    pub fn prices(&self) -> Vec<f64> {
        self.quotes.iter().map(|q| q.price).collect()
    }
    pub fn strike(&self, q: &Quote) -> f64 {
        self.s0_ref * q.y.exp()
    }

    /// Distinct maturities, sorted ascending.
    pub fn maturities(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.quotes.iter().map(|q| q.tau).collect();
        t.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        t.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
        t
    }

    /// Drops quotes outside the mesh rectangle and returns the number
    /// removed, or an error when nothing is left.
    pub fn restrict_to(self, mesh: &MeshSpec) -> Result<(Self, usize)> {
        let total = self.quotes.len();
        let kept: Vec<Quote> =
            self.quotes.into_iter().filter(|q| mesh.contains(q.tau, q.y) && q.tau > 0.0).collect();
        let dropped = total - kept.len();
        if dropped > 0 {
            log::warn!("dropped {dropped} of {total} quotes outside the mesh");
        }
        if kept.is_empty() {
            return Err(Error::NoQuotes(format!("all {total} quotes lie outside the mesh")));
        }
        Ok((Self { quotes: kept, s0_ref: self.s0_ref }, dropped))
    }
}

/// Sparse `l x M` bilinear interpolation matrix from mesh nodes to quote
/// locations.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationOperator {
    mesh: MeshSpec,
    rows: Vec<Vec<(usize, f64)>>,
}

impl ObservationOperator {
    pub fn mesh(&self) -> &MeshSpec {
        &self.mesh
    }
    /// Per quote, the `(flat node index, weight)` pairs.
    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }
    pub fn len(&self) -> usize {
        self.rows.len()
    }
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn weights_at(mesh: &MeshSpec, tau: f64, y: f64) -> Option<Vec<(usize, f64)>> {
        if !mesh.contains(tau, y) {
            return None;
        }
        let (i0, t) = MeshSpec::locate(tau / mesh.dtau, mesh.n_tau() - 1);
        let (j0, s) = MeshSpec::locate((y - mesh.l_y) / mesh.dy, mesh.n_y() - 1);
        let mut row = Vec::with_capacity(4);
        for (di, wt) in [(0, 1.0 - t), (1, t)] {
            for (dj, wy) in [(0, 1.0 - s), (1, s)] {
                let w = wt * wy;
                if w > 0.0 {
                    row.push((mesh.flat(i0 + di, j0 + dj), w));
                }
            }
        }
        Some(row)
    }

    /// Projects a field of mesh values onto the quote locations.
    pub fn apply_values(&self, values: &Array2<f64>) -> Vec<f64> {
        let flat = values.as_slice().expect("standard layout");
        self.rows.iter().map(|row| row.iter().map(|&(k, w)| w * flat[k]).sum()).collect()
    }

    pub fn apply(&self, u: &PriceSurface) -> Vec<f64> {
        self.apply_values(&u.values)
    }

    /// Transposed application: scatters one value per quote back onto the mesh.
    pub fn apply_transpose(&self, r: &[f64]) -> Array2<f64> {
        let mut out = Array2::zeros(self.mesh.shape());
        let flat = out.as_slice_mut().expect("standard layout");
        for (row, &v) in self.rows.iter().zip(r) {
            for &(k, w) in row {
                flat[k] += w * v;
            }
        }
        out
    }
}

/// Builds the bilinear observation operator for `obs` on `mesh`.
pub fn build_observation_operator(mesh: &MeshSpec, obs: &ObservationSet) -> Result<ObservationOperator> {
    let rows = obs
        .quotes
        .iter()
        .enumerate()
        .map(|(index, q)| {
            ObservationOperator::weights_at(mesh, q.tau, q.y)
                .ok_or(Error::QuoteOutsideMesh { index, tau: q.tau, y: q.y })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ObservationOperator { mesh: *mesh, rows })
}
