//! Grids, grid fields, and validated system descriptions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Compiled, Var};
use crate::math::{cubic_weights, cubic_weights_at, gauss_solve};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("hyperbolicity validation failed: {quantity} = {value:.6e} < lambda0 = {lambda0:.3e} at (x, t) = ({x:.6}, {t:.6})")]
    ValidationFailed { quantity: String, x: f64, t: f64, value: f64, lambda0: f64 },
    #[error("|det Q| = {det:.3e} below lambda0 at (x, t) = ({x:.6}, {t:.6})")]
    SingularQ { x: f64, t: f64, det: f64 },
    #[error("state left the box: |V| = {norm:.6e} > delta0 = {delta0:.3e}")]
    StateOutOfBox { norm: f64, delta0: f64 },
    #[error("expression for {slot} uses variable `{var}`, which is not allowed there")]
    IllegalVariable { slot: String, var: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Time axis of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TimeTopology {
    /// `nt` nodes `origin + k T / nt`; lookups wrap modulo `period`.
    Periodic { period: f64, origin: f64 },
    /// `nt + 1` nodes spanning `[t_lo, t_hi]`; lookups clamp. Diagnostics
    /// skip the first `spin_up` time units.
    Window { t_lo: f64, t_hi: f64, spin_up: f64 },
}

/// Uniform grid: `nx + 1` nodes on `[0, 1]` and the time nodes of the topology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub nt: usize,
    pub topology: TimeTopology,
}

/// Position on the time axis: base node and fractional offset in `[0, 1)`.
#[derive(Debug, Clone, Copy)]
struct TimePos {
    k: usize,
    s: f64,
}

impl Grid {
    pub fn new(nx: usize, nt: usize, topology: TimeTopology) -> Result<Grid, FieldError> {
        if nx < 2 || nt < 4 {
            return Err(FieldError::InvalidGrid(format!("need nx >= 2 and nt >= 4, got nx = {nx}, nt = {nt}")));
        }
        match topology {
            TimeTopology::Periodic { period, origin } => {
                if !(period > 0.0 && period.is_finite() && origin.is_finite()) {
                    return Err(FieldError::InvalidGrid(format!("period must be positive and finite, got {period}")));
                }
            }
            TimeTopology::Window { t_lo, t_hi, spin_up } => {
                if !(t_hi > t_lo && t_lo.is_finite() && t_hi.is_finite()) {
                    return Err(FieldError::InvalidGrid(format!("window needs t_lo < t_hi, got [{t_lo}, {t_hi}]")));
                }
                if !(spin_up >= 0.0 && spin_up < t_hi - t_lo) {
                    return Err(FieldError::InvalidGrid(format!("spin-up {spin_up} must lie in [0, t_hi - t_lo)")));
                }
            }
        }
        Ok(Grid { nx, nt, topology })
    }

    pub fn periodic(nx: usize, nt: usize, period: f64, origin: f64) -> Result<Grid, FieldError> {
        Grid::new(nx, nt, TimeTopology::Periodic { period, origin })
    }

    pub fn window(nx: usize, nt: usize, t_lo: f64, t_hi: f64, spin_up: f64) -> Result<Grid, FieldError> {
        Grid::new(nx, nt, TimeTopology::Window { t_lo, t_hi, spin_up })
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self.topology, TimeTopology::Periodic { .. })
    }

    /// Number of stored time nodes.
    pub fn ntn(&self) -> usize {
        match self.topology {
            TimeTopology::Periodic { .. } => self.nt,
            TimeTopology::Window { .. } => self.nt + 1,
        }
    }

    pub fn nxn(&self) -> usize {
        self.nx + 1
    }

    pub fn nodes(&self) -> usize {
        self.nxn() * self.ntn()
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn dt(&self) -> f64 {
        match self.topology {
            TimeTopology::Periodic { period, .. } => period / self.nt as f64,
            TimeTopology::Window { t_lo, t_hi, .. } => (t_hi - t_lo) / self.nt as f64,
        }
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        if i == self.nx {
            1.0
        } else {
            i as f64 / self.nx as f64
        }
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        match self.topology {
            TimeTopology::Periodic { period, origin } => origin + period * (k as f64 / self.nt as f64),
            TimeTopology::Window { t_lo, t_hi, .. } => {
                if k == self.nt {
                    t_hi
                } else {
                    t_lo + (t_hi - t_lo) * (k as f64 / self.nt as f64)
                }
            }
        }
    }

    pub fn t_start(&self) -> f64 {
        self.t(0)
    }

    /// Lower end of the diagnostic time range.
    pub fn diagnostic_t_lo(&self) -> f64 {
        match self.topology {
            TimeTopology::Periodic { origin, .. } => origin,
            TimeTopology::Window { t_lo, spin_up, .. } => t_lo + spin_up,
        }
    }

    /// Time nodes included in reported diagnostics.
    pub fn diagnostic_nodes(&self) -> core::ops::Range<usize> {
        match self.topology {
            TimeTopology::Periodic { .. } => 0..self.nt,
            TimeTopology::Window { t_lo, spin_up, .. } => {
                let dt = self.dt();
                let k0 = libm::ceil((spin_up - 1e-9 * dt) / dt).max(0.0) as usize;
                let _ = t_lo;
                k0.min(self.nt)..self.nt + 1
            }
        }
    }

    #[inline]
    fn locate(&self, t: f64) -> TimePos {
        match self.topology {
            TimeTopology::Periodic { period, origin } => {
                let mut ph = libm::fmod(t - origin, period);
                if ph < 0.0 {
                    ph += period;
                }
                if ph >= period {
                    ph -= period;
                }
                let s = ph / period * self.nt as f64;
                let f = libm::floor(s);
                let k = (f as usize) % self.nt;
                let mut frac = s - f;
                if frac >= 1.0 {
                    frac = 0.0;
                }
                TimePos { k, s: frac }
            }
            TimeTopology::Window { t_lo, t_hi, .. } => {
                let s = ((t - t_lo) / (t_hi - t_lo) * self.nt as f64).clamp(0.0, self.nt as f64);
                let f = libm::floor(s);
                let k = (f as usize).min(self.nt - 1);
                TimePos { k, s: s - k as f64 }
            }
        }
    }

    /// Linear interpolation stencil in time: `[(k0, w0), (k1, w1)]`.
    #[inline]
    pub fn lin_stencil(&self, t: f64) -> [(usize, f64); 2] {
        let p = self.locate(t);
        let k1 = if self.is_periodic() { (p.k + 1) % self.nt } else { p.k + 1 };
        [(p.k, 1.0 - p.s), (k1, p.s)]
    }

    /// Four-point Lagrange stencil in time.
    #[inline]
    pub fn cubic_stencil(&self, t: f64) -> [(usize, f64); 4] {
        let p = self.locate(t);
        if self.is_periodic() {
            let nt = self.nt;
            let w = cubic_weights(p.s);
            [((p.k + nt - 1) % nt, w[0]), (p.k, w[1]), ((p.k + 1) % nt, w[2]), ((p.k + 2) % nt, w[3])]
        } else {
            let last = self.nt; // highest node index
            let k0 = (p.k as isize - 1).clamp(0, last as isize - 3) as usize;
            let pos = (p.k - k0) as f64 + p.s;
            let w = cubic_weights_at(pos);
            [(k0, w[0]), (k0 + 1, w[1]), (k0 + 2, w[2]), (k0 + 3, w[3])]
        }
    }

    /// Spatial stencil: base cell index and fraction.
    #[inline]
    pub fn x_cell(&self, x: f64) -> (usize, f64) {
        let s = (x * self.nx as f64).clamp(0.0, self.nx as f64);
        let i = (libm::floor(s) as usize).min(self.nx - 1);
        (i, s - i as f64)
    }
}

/// Interpolates a time series stored on the grid's time nodes (linear).
#[inline]
pub fn series_lin(grid: &Grid, series: &[f64], t: f64) -> f64 {
    let st = grid.lin_stencil(t);
    st[0].1 * series[st[0].0] + st[1].1 * series[st[1].0]
}

/// Interpolates a time series stored on the grid's time nodes (cubic).
#[inline]
pub fn series_cubic(grid: &Grid, series: &[f64], t: f64) -> f64 {
    let st = grid.cubic_stencil(t);
    st[0].1 * series[st[0].0] + st[1].1 * series[st[1].0] + st[2].1 * series[st[2].0] + st[3].1 * series[st[3].0]
}

/// Vector field sampled on a [`Grid`]. Storage is time-contiguous per
/// (component, spatial node).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub grid: Grid,
    pub n: usize,
    pub data: Vec<f64>,
}

impl GridField {
    pub fn zeros(grid: Grid, n: usize) -> GridField {
        GridField { grid, n, data: vec![0.0; n * grid.nodes()] }
    }

    pub fn from_fn(grid: Grid, n: usize, mut f: impl FnMut(usize, f64, f64) -> f64) -> GridField {
        let mut out = GridField::zeros(grid, n);
        for c in 0..n {
            for i in 0..grid.nxn() {
                let x = grid.x(i);
                for k in 0..grid.ntn() {
                    let idx = out.idx(c, i, k);
                    out.data[idx] = f(c, x, grid.t(k));
                }
            }
        }
        out
    }

    pub fn from_data(grid: Grid, n: usize, data: Vec<f64>) -> Result<GridField, FieldError> {
        if data.len() != n * grid.nodes() {
            return Err(FieldError::Shape(format!("expected {} values, got {}", n * grid.nodes(), data.len())));
        }
        let f = GridField { grid, n, data };
        if !f.all_finite() {
            return Err(FieldError::NonFinite("field data".into()));
        }
        Ok(f)
    }

    #[inline]
    pub fn idx(&self, c: usize, i: usize, k: usize) -> usize {
        (c * self.grid.nxn() + i) * self.grid.ntn() + k
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, k: usize) -> f64 {
        self.data[self.idx(c, i, k)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, k: usize, v: f64) {
        let idx = self.idx(c, i, k);
        self.data[idx] = v;
    }

    /// Time series of component `c` at spatial node `i`.
    #[inline]
    pub fn column(&self, c: usize, i: usize) -> &[f64] {
        let ntn = self.grid.ntn();
        let s = (c * self.grid.nxn() + i) * ntn;
        &self.data[s..s + ntn]
    }

    #[inline]
    pub fn column_mut(&mut self, c: usize, i: usize) -> &mut [f64] {
        let ntn = self.grid.ntn();
        let s = (c * self.grid.nxn() + i) * ntn;
        &mut self.data[s..s + ntn]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &GridField) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn same_shape(&self, other: &GridField) -> bool {
        self.n == other.n && self.grid == other.grid
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &GridField) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Linear interpolation in time at spatial node `i`.
    #[inline]
    pub fn at_node_lin(&self, c: usize, i: usize, t: f64) -> f64 {
        series_lin(&self.grid, self.column(c, i), t)
    }

    /// Cubic interpolation in time at spatial node `i`.
    #[inline]
    pub fn at_node_cubic(&self, c: usize, i: usize, t: f64) -> f64 {
        series_cubic(&self.grid, self.column(c, i), t)
    }

    /// Bilinear interpolation in `(x, t)`.
    #[inline]
    pub fn interp(&self, c: usize, x: f64, t: f64) -> f64 {
        let (i, fx) = self.grid.x_cell(x);
        let st = self.grid.lin_stencil(t);
        let lo = self.column(c, i);
        let hi = self.column(c, i + 1);
        let vl = st[0].1 * lo[st[0].0] + st[1].1 * lo[st[1].0];
        if fx == 0.0 {
            return vl;
        }
        let vh = st[0].1 * hi[st[0].0] + st[1].1 * hi[st[1].0];
        (1.0 - fx) * vl + fx * vh
    }

    /// Sup over the diagnostic time range of `|u_c(x_i, t)|` for all `c, i`.
    pub fn diagnostic_sup(&self) -> f64 {
        let r = self.grid.diagnostic_nodes();
        let mut m = 0.0f64;
        for c in 0..self.n {
            for i in 0..self.grid.nxn() {
                for v in &self.column(c, i)[r.clone()] {
                    m = m.max(v.abs());
                }
            }
        }
        m
    }

    /// Central difference in time (one-sided at window edges).
    pub fn dt_central(&self) -> GridField {
        let g = self.grid;
        let ntn = g.ntn();
        let dt = g.dt();
        let mut out = GridField::zeros(g, self.n);
        for c in 0..self.n {
            for i in 0..g.nxn() {
                let col = self.column(c, i);
                let dst = out.column_mut(c, i);
                for k in 0..ntn {
                    dst[k] = if g.is_periodic() {
                        (col[(k + 1) % ntn] - col[(k + ntn - 1) % ntn]) / (2.0 * dt)
                    } else if k == 0 {
                        (-3.0 * col[0] + 4.0 * col[1] - col[2]) / (2.0 * dt)
                    } else if k == ntn - 1 {
                        (3.0 * col[k] - 4.0 * col[k - 1] + col[k - 2]) / (2.0 * dt)
                    } else {
                        (col[k + 1] - col[k - 1]) / (2.0 * dt)
                    };
                }
            }
        }
        out
    }

    /// Central difference in `x` (second-order one-sided at the ends).
    pub fn dx_central(&self) -> GridField {
        let g = self.grid;
        let nx = g.nx;
        let h = g.dx();
        let mut out = GridField::zeros(g, self.n);
        for c in 0..self.n {
            for i in 0..=nx {
                for k in 0..g.ntn() {
                    let v = if i == 0 {
                        (-3.0 * self.get(c, 0, k) + 4.0 * self.get(c, 1, k) - self.get(c, 2, k)) / (2.0 * h)
                    } else if i == nx {
                        (3.0 * self.get(c, nx, k) - 4.0 * self.get(c, nx - 1, k) + self.get(c, nx - 2, k)) / (2.0 * h)
                    } else {
                        (self.get(c, i + 1, k) - self.get(c, i - 1, k)) / (2.0 * h)
                    };
                    out.set(c, i, k, v);
                }
            }
        }
        out
    }
}

/// Coefficients of a diagonal system `u_t + a u_x + b u = g`.
///
/// Indices are zero based; families `j < m` have positive speed.
pub trait Coefficients: Sync {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    fn a(&self, j: usize, x: f64, t: f64) -> f64;
    fn a_t(&self, j: usize, x: f64, t: f64) -> f64;
    fn b(&self, j: usize, k: usize, x: f64, t: f64) -> f64;
    fn b_t(&self, j: usize, k: usize, x: f64, t: f64) -> f64;
    /// False when every off-diagonal entry of `b` vanishes identically.
    fn has_coupling(&self) -> bool;
    /// `(a_j, b_jj, d a_j / dt)` at one point.
    #[inline]
    fn rates(&self, j: usize, x: f64, t: f64) -> (f64, f64, f64) {
        (self.a(j, x, t), self.b(j, j, x, t), self.a_t(j, x, t))
    }
}

/// Diagonal system with expression coefficients in `(x, t)`.
#[derive(Debug, Clone)]
pub struct DiagonalSystem {
    pub n: usize,
    pub m: usize,
    pub a: Vec<Compiled>,
    pub b: Vec<Vec<Compiled>>,
    a_t: Vec<Compiled>,
    b_t: Vec<Vec<Compiled>>,
    coupled: bool,
}

fn check_vars(slot: &str, c: &Compiled, allowed: &[Var]) -> Result<(), FieldError> {
    for v in c.expr.free_vars() {
        if !allowed.contains(&v) {
            return Err(FieldError::IllegalVariable { slot: slot.into(), var: v.name() });
        }
    }
    Ok(())
}

impl DiagonalSystem {
    pub fn new(m: usize, a: Vec<Compiled>, b: Vec<Vec<Compiled>>) -> Result<DiagonalSystem, FieldError> {
        let n = a.len();
        if n == 0 || m > n {
            return Err(FieldError::Shape(format!("need n >= 1 and m <= n, got n = {n}, m = {m}")));
        }
        if b.len() != n || b.iter().any(|r| r.len() != n) {
            return Err(FieldError::Shape(format!("b must be {n} x {n}")));
        }
        let xt = [Var::X, Var::T];
        for (j, aj) in a.iter().enumerate() {
            check_vars(&format!("a[{}]", j + 1), aj, &xt)?;
        }
        for (j, row) in b.iter().enumerate() {
            for (k, bjk) in row.iter().enumerate() {
                check_vars(&format!("b[{}][{}]", j + 1, k + 1), bjk, &xt)?;
            }
        }
        let a_t = a.iter().map(|c| c.diff(Var::T)).collect();
        let b_t = b.iter().map(|r| r.iter().map(|c| c.diff(Var::T)).collect()).collect();
        let coupled = (0..n).any(|j| (0..n).any(|k| k != j && !b[j][k].is_zero()));
        Ok(DiagonalSystem { n, m, a, b, a_t, b_t, coupled })
    }

    /// Builds from expression strings.
    pub fn parse(m: usize, a: &[&str], b: &[&[&str]]) -> Result<DiagonalSystem, crate::expr::ParseError> {
        let a = a.iter().map(|s| Compiled::parse(s)).collect::<Result<Vec<_>, _>>()?;
        let b = b
            .iter()
            .map(|r| r.iter().map(|s| Compiled::parse(s)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        DiagonalSystem::new(m, a, b)
            .map_err(|e| crate::expr::ParseError::Syntax { offset: 0, message: alloc::string::ToString::to_string(&e) })
    }

    /// True when no speed depends on `t`.
    pub fn is_autonomous(&self) -> bool {
        self.a_t.iter().all(|c| c.is_zero())
    }
}

impl Coefficients for DiagonalSystem {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    #[inline]
    fn a(&self, j: usize, x: f64, t: f64) -> f64 {
        self.a[j].at(x, t)
    }
    #[inline]
    fn a_t(&self, j: usize, x: f64, t: f64) -> f64 {
        self.a_t[j].at(x, t)
    }
    #[inline]
    fn b(&self, j: usize, k: usize, x: f64, t: f64) -> f64 {
        self.b[j][k].at(x, t)
    }
    #[inline]
    fn b_t(&self, j: usize, k: usize, x: f64, t: f64) -> f64 {
        self.b_t[j][k].at(x, t)
    }
    fn has_coupling(&self) -> bool {
        self.coupled
    }
}

/// Outcome of [`validate_hyperbolicity`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicityReport {
    /// `min_j` of `a_j` (j < m) and `-a_j` (j >= m).
    pub min_speed_margin: f64,
    /// `min_{j != k} |a_j - a_k|`; infinite for `n = 1`.
    pub min_gap: f64,
    pub min_det_q: Option<f64>,
    pub lambda0: f64,
    pub pass: bool,
}

/// Checks the speed sign pattern, the pairwise gaps and, when given,
/// `|det q|` against `lambda0` on all nodes of `sampling`.
pub fn validate_hyperbolicity(
    sys: &dyn Coefficients,
    sampling: &Grid,
    lambda0: f64,
    det_q: Option<&dyn Fn(f64, f64) -> f64>,
) -> Result<HyperbolicityReport, FieldError> {
    let n = sys.n();
    let m = sys.m();
    let mut rep = HyperbolicityReport {
        min_speed_margin: f64::INFINITY,
        min_gap: f64::INFINITY,
        min_det_q: det_q.map(|_| f64::INFINITY),
        lambda0,
        pass: true,
    };
    let mut worst: Option<(String, f64, f64, f64)> = None;
    let note = |q: String, x: f64, t: f64, v: f64, worst: &mut Option<(String, f64, f64, f64)>| {
        if v < lambda0 && worst.as_ref().map_or(true, |w| v < w.3) {
            *worst = Some((q, x, t, v));
        }
    };
    let mut a = vec![0.0; n];
    for i in 0..sampling.nxn() {
        let x = sampling.x(i);
        for k in 0..sampling.ntn() {
            let t = sampling.t(k);
            for (j, aj) in a.iter_mut().enumerate() {
                *aj = sys.a(j, x, t);
                let margin = if j < m { *aj } else { -*aj };
                let margin = if margin.is_nan() { f64::NEG_INFINITY } else { margin };
                rep.min_speed_margin = rep.min_speed_margin.min(margin);
                note(format!("signed speed a[{}]", j + 1), x, t, margin, &mut worst);
            }
            for j in 0..n {
                for l in j + 1..n {
                    let gap = (a[j] - a[l]).abs();
                    let gap = if gap.is_nan() { f64::NEG_INFINITY } else { gap };
                    rep.min_gap = rep.min_gap.min(gap);
                    note(format!("gap |a[{}] - a[{}]|", j + 1, l + 1), x, t, gap, &mut worst);
                }
            }
            if let Some(dq) = det_q {
                let d = dq(x, t).abs();
                let d = if d.is_nan() { f64::NEG_INFINITY } else { d };
                rep.min_det_q = rep.min_det_q.map(|m| m.min(d));
                note("|det Q|".into(), x, t, d, &mut worst);
            }
        }
    }
    match worst {
        Some((quantity, x, t, value)) => Err(FieldError::ValidationFailed { quantity, x, t, value, lambda0 }),
        None => Ok(rep),
    }
}

// ---------------------------------------------------------------------------
// Quasilinear systems and frozen-state snapshots
// ---------------------------------------------------------------------------

/// Quasilinear system `V_t + A(x,t,V) V_x + B(x,t,V) V = f(x,t)` with
/// user-supplied eigenvalues `A_j` and diagonalizer `Q`.
#[derive(Debug, Clone)]
pub struct QuasilinearSystem {
    pub n: usize,
    pub m: usize,
    pub amat: Vec<Vec<Compiled>>,
    pub eig: Vec<Compiled>,
    pub bmat: Vec<Vec<Compiled>>,
    pub qmat: Vec<Vec<Compiled>>,
    eig_t: Vec<Compiled>,
    eig_v: Vec<Vec<Compiled>>,
    q_t: Vec<Vec<Compiled>>,
    q_x: Vec<Vec<Compiled>>,
    q_v: Vec<Vec<Vec<Compiled>>>,
}

impl QuasilinearSystem {
    pub fn new(
        m: usize,
        amat: Vec<Vec<Compiled>>,
        eig: Vec<Compiled>,
        bmat: Vec<Vec<Compiled>>,
        qmat: Vec<Vec<Compiled>>,
    ) -> Result<QuasilinearSystem, FieldError> {
        let n = eig.len();
        if n == 0 || m > n {
            return Err(FieldError::Shape(format!("need n >= 1 and m <= n, got n = {n}, m = {m}")));
        }
        for (name, mat) in [("A", &amat), ("B", &bmat), ("Q", &qmat)] {
            if mat.len() != n || mat.iter().any(|r| r.len() != n) {
                return Err(FieldError::Shape(format!("{name} must be {n} x {n}")));
            }
        }
        let mut allowed = vec![Var::X, Var::T];
        allowed.extend((0..n).map(|i| Var::V(i as u16)));
        for (name, mat) in [("A", &amat), ("B", &bmat), ("Q", &qmat)] {
            for (j, row) in mat.iter().enumerate() {
                for (k, e) in row.iter().enumerate() {
                    check_vars(&format!("{name}[{}][{}]", j + 1, k + 1), e, &allowed)?;
                }
            }
        }
        for (j, e) in eig.iter().enumerate() {
            check_vars(&format!("eigenvalue[{}]", j + 1), e, &allowed)?;
        }
        let eig_t = eig.iter().map(|e| e.diff(Var::T)).collect();
        let eig_v = eig.iter().map(|e| (0..n).map(|l| e.diff(Var::V(l as u16))).collect()).collect();
        let q_t = qmat.iter().map(|r| r.iter().map(|e| e.diff(Var::T)).collect()).collect();
        let q_x = qmat.iter().map(|r| r.iter().map(|e| e.diff(Var::X)).collect()).collect();
        let q_v = qmat.iter().map(|r| r.iter().map(|e| (0..n).map(|l| e.diff(Var::V(l as u16))).collect()).collect()).collect();
        Ok(QuasilinearSystem { n, m, amat, eig, bmat, qmat, eig_t, eig_v, q_t, q_x, q_v })
    }

    /// Adds `eps * sin(t)` to every eigenvalue and to the diagonal of `A`.
    pub fn perturbed(&self, eps: f64) -> QuasilinearSystem {
        use crate::expr::{Expr, Func};
        let bump = Expr::mul(Expr::c(eps), Expr::call(Func::Sin, Expr::var(Var::T)));
        let mut amat = self.amat.clone();
        for (j, row) in amat.iter_mut().enumerate() {
            row[j] = Compiled::new(Expr::add(row[j].expr.clone(), bump.clone()));
        }
        let eig = self.eig.iter().map(|e| Compiled::new(Expr::add(e.expr.clone(), bump.clone()))).collect();
        QuasilinearSystem::new(self.m, amat, eig, self.bmat.clone(), self.qmat.clone())
            .expect("perturbation preserves shape and variables")
    }

    /// `det Q(x, t, v)`.
    pub fn det_q(&self, x: f64, t: f64, v: &[f64]) -> f64 {
        let n = self.n;
        let mut q = vec![0.0; n * n];
        for j in 0..n {
            for k in 0..n {
                q[j * n + k] = self.qmat[j][k].at_v(x, t, v);
            }
        }
        let mut rhs = vec![0.0; n];
        gauss_solve(n, &mut q, &mut rhs, 1)
    }
}

/// Frozen coefficients of the diagonalized system at a given state,
/// stored on the grid and interpolated bilinearly.
#[derive(Debug, Clone)]
pub struct GridCoefficients {
    pub n: usize,
    pub m: usize,
    /// Speeds `a_j`, `n` components.
    pub a: GridField,
    /// Total time derivative of `a_j` along the frozen state.
    pub a_t: GridField,
    /// Coupling `b_jk` stored as component `j * n + k`.
    pub b: GridField,
    pub b_t: GridField,
    /// `Q` at the state, component `j * n + k`.
    pub q: GridField,
    /// `Q^{-1}` at the state.
    pub q_inv: GridField,
    coupled: bool,
}

impl GridCoefficients {
    pub fn grid(&self) -> Grid {
        self.a.grid
    }

    /// `Q^{-1} f` on the grid.
    pub fn transform_rhs(&self, f: &[Compiled]) -> GridField {
        let n = self.n;
        let g = self.grid();
        let mut out = GridField::zeros(g, n);
        let mut fv = vec![0.0; n];
        for i in 0..g.nxn() {
            let x = g.x(i);
            for k in 0..g.ntn() {
                let t = g.t(k);
                for (j, fj) in fv.iter_mut().enumerate() {
                    *fj = f[j].at(x, t);
                }
                for j in 0..n {
                    let mut s = 0.0;
                    for l in 0..n {
                        s += self.q_inv.get(j * n + l, i, k) * fv[l];
                    }
                    out.set(j, i, k, s);
                }
            }
        }
        out
    }

    /// `V = Q U` on the grid.
    pub fn to_state(&self, u: &GridField) -> GridField {
        let n = self.n;
        let g = self.grid();
        let mut out = GridField::zeros(g, n);
        for i in 0..g.nxn() {
            for k in 0..g.ntn() {
                for j in 0..n {
                    let mut s = 0.0;
                    for l in 0..n {
                        s += self.q.get(j * n + l, i, k) * u.get(l, i, k);
                    }
                    out.set(j, i, k, s);
                }
            }
        }
        out
    }
}

impl Coefficients for GridCoefficients {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    #[inline]
    fn a(&self, j: usize, x: f64, t: f64) -> f64 {
        self.a.interp(j, x, t)
    }
    #[inline]
    fn a_t(&self, j: usize, x: f64, t: f64) -> f64 {
        self.a_t.interp(j, x, t)
    }
    #[inline]
    fn b(&self, j: usize, k: usize, x: f64, t: f64) -> f64 {
        self.b.interp(j * self.n + k, x, t)
    }
    #[inline]
    fn b_t(&self, j: usize, k: usize, x: f64, t: f64) -> f64 {
        self.b_t.interp(j * self.n + k, x, t)
    }
    fn has_coupling(&self) -> bool {
        self.coupled
    }
}

/// Diagonalizes the quasilinear system around the state `v` with
/// derivative fields `v_t`, `v_x`:
/// `a = diag A_j(V)`, `b = Q^{-1} (B Q + dQ/dt + A dQ/dx)` with total
/// derivatives through `V` by the chain rule.
pub fn diagonalize_at_state(
    sys: &QuasilinearSystem,
    v: &GridField,
    v_t: &GridField,
    v_x: &GridField,
    lambda0: f64,
    delta0: f64,
) -> Result<GridCoefficients, FieldError> {
    let n = sys.n;
    let g = v.grid;
    if v.n != n || !v.same_shape(v_t) || !v.same_shape(v_x) {
        return Err(FieldError::Shape("state and derivative fields must have n components on one grid".into()));
    }
    let norm = v.sup_norm();
    if norm > delta0 {
        return Err(FieldError::StateOutOfBox { norm, delta0 });
    }
    let mut a = GridField::zeros(g, n);
    let mut a_t = GridField::zeros(g, n);
    let mut b = GridField::zeros(g, n * n);
    let mut qf = GridField::zeros(g, n * n);
    let mut qi = GridField::zeros(g, n * n);
    let mut vv = vec![0.0; n];
    let mut vt = vec![0.0; n];
    let mut vx = vec![0.0; n];
    let mut q = vec![0.0; n * n];
    let mut m = vec![0.0; n * n];
    let mut qtot_t = vec![0.0; n * n];
    let mut qtot_x = vec![0.0; n * n];
    let mut am = vec![0.0; n * n];
    let mut bm = vec![0.0; n * n];
    let mut work = vec![0.0; n * n];
    let mut inv = vec![0.0; n * n];
    for i in 0..g.nxn() {
        let x = g.x(i);
        for k in 0..g.ntn() {
            let t = g.t(k);
            for l in 0..n {
                vv[l] = v.get(l, i, k);
                vt[l] = v_t.get(l, i, k);
                vx[l] = v_x.get(l, i, k);
            }
            for j in 0..n {
                let aj = sys.eig[j].at_v(x, t, &vv);
                let mut ajt = sys.eig_t[j].at_v(x, t, &vv);
                for l in 0..n {
                    ajt += sys.eig_v[j][l].at_v(x, t, &vv) * vt[l];
                }
                a.set(j, i, k, aj);
                a_t.set(j, i, k, ajt);
                for c in 0..n {
                    let e = j * n + c;
                    q[e] = sys.qmat[j][c].at_v(x, t, &vv);
                    am[e] = sys.amat[j][c].at_v(x, t, &vv);
                    bm[e] = sys.bmat[j][c].at_v(x, t, &vv);
                    let mut dt = sys.q_t[j][c].at_v(x, t, &vv);
                    let mut dx = sys.q_x[j][c].at_v(x, t, &vv);
                    for l in 0..n {
                        let dv = sys.q_v[j][c][l].at_v(x, t, &vv);
                        dt += dv * vt[l];
                        dx += dv * vx[l];
                    }
                    qtot_t[e] = dt;
                    qtot_x[e] = dx;
                }
            }
            // m = B Q + Q_t + A Q_x
            for r in 0..n {
                for c in 0..n {
                    let mut s = qtot_t[r * n + c];
                    for l in 0..n {
                        s += bm[r * n + l] * q[l * n + c] + am[r * n + l] * qtot_x[l * n + c];
                    }
                    m[r * n + c] = s;
                }
            }
            work.copy_from_slice(&q);
            let det = gauss_solve(n, &mut work, &mut m, n);
            if !(det.abs() >= lambda0) {
                return Err(FieldError::SingularQ { x, t, det });
            }
            work.copy_from_slice(&q);
            for (e, val) in inv.iter_mut().enumerate() {
                *val = if e / n == e % n { 1.0 } else { 0.0 };
            }
            gauss_solve(n, &mut work, &mut inv, n);
            for e in 0..n * n {
                b.set(e, i, k, m[e]);
                qf.set(e, i, k, q[e]);
                qi.set(e, i, k, inv[e]);
            }
        }
    }
    for (name, f) in [("a", &a), ("a_t", &a_t), ("b", &b), ("Q", &qf)] {
        if !f.all_finite() {
            return Err(FieldError::NonFinite(format!("diagonalized {name}")));
        }
    }
    let b_t = b.dt_central();
    let coupled =
        (0..n).any(|j| (0..n).any(|c| c != j && (0..g.nxn()).any(|i| b.column(j * n + c, i).iter().any(|v| *v != 0.0))));
    Ok(GridCoefficients { n, m: sys.m, a, a_t, b, b_t, q: qf, q_inv: qi, coupled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Compiled;
    use alloc::vec;

    fn c(s: &str) -> Compiled {
        Compiled::parse(s).unwrap()
    }

    fn grid() -> Grid {
        Grid::periodic(16, 64, 2.0 * core::f64::consts::PI, 0.0).unwrap()
    }

    #[test]
    fn counterexample_speeds_pass() {
        let sys = DiagonalSystem::parse(1, &["2/(4*pi-1)", "-(2+sin(t))"], &[&["0", "0"], &["0", "0"]]).unwrap();
        let g = Grid::periodic(8, 4096, 2.0 * core::f64::consts::PI, 0.0).unwrap();
        let r = validate_hyperbolicity(&sys, &g, 0.1, None).unwrap();
        assert!((r.min_speed_margin - 2.0 / (4.0 * core::f64::consts::PI - 1.0)).abs() < 1e-12);
        assert!(r.min_gap >= 1.17);
        assert!((r.min_gap - (1.0 + 2.0 / (4.0 * core::f64::consts::PI - 1.0))).abs() < 1e-6);
    }

    #[test]
    fn constant_speeds_gap_two() {
        let sys = DiagonalSystem::parse(1, &["1", "-1"], &[&["0", "0"], &["0", "0"]]).unwrap();
        let r = validate_hyperbolicity(&sys, &grid(), 0.5, None).unwrap();
        assert_eq!(r.min_gap, 2.0);
        assert!(r.pass);
    }

    #[test]
    fn sign_change_fails() {
        let sys = DiagonalSystem::parse(1, &["sin(t)", "-1"], &[&["0", "0"], &["0", "0"]]).unwrap();
        let e = validate_hyperbolicity(&sys, &grid(), 0.1, None).unwrap_err();
        assert!(matches!(e, FieldError::ValidationFailed { ref quantity, .. } if quantity.contains("a[1]")));
    }

    #[test]
    fn node_interpolation_is_exact() {
        let g = grid();
        let f = GridField::from_fn(g, 1, |_, x, t| libm::sin(3.0 * x + t) + x * x);
        for i in [0, 3, 16] {
            for k in [0, 7, 63] {
                let v = f.interp(0, g.x(i), g.t(k));
                assert_eq!(v.to_bits(), f.get(0, i, k).to_bits());
                assert_eq!(f.at_node_cubic(0, i, g.t(k)).to_bits(), f.get(0, i, k).to_bits());
            }
        }
    }

    #[test]
    fn bilinear_exact_on_window() {
        let g = Grid::window(10, 20, -1.0, 3.0, 0.5).unwrap();
        let f = GridField::from_fn(g, 1, |_, x, t| 2.0 + 3.0 * x - 0.5 * t + 1.5 * x * t);
        for &(x, t) in &[(0.13, 0.77), (0.5, -0.9), (0.99, 2.95), (0.0, 1.234)] {
            let exact = 2.0 + 3.0 * x - 0.5 * t + 1.5 * x * t;
            assert!((f.interp(0, x, t) - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn linearization_at_zero_matches_parent() {
        let sys = QuasilinearSystem::new(
            1,
            vec![vec![c("1+V1+x"), c("0")], vec![c("0"), c("-2+t")]],
            vec![c("1+V1+x"), c("-2+t")],
            vec![vec![c("0.3"), c("0.1*x")], vec![c("0"), c("0.2*sin(t)")]],
            vec![vec![c("1"), c("0")], vec![c("0"), c("1")]],
        )
        .unwrap();
        let g = Grid::window(8, 8, 0.0, 0.5, 0.0).unwrap();
        let z = GridField::zeros(g, 2);
        let snap = diagonalize_at_state(&sys, &z, &z, &z, 1e-3, 1.0).unwrap();
        for i in 0..=8 {
            for k in 0..=8 {
                let (x, t) = (g.x(i), g.t(k));
                assert_eq!(snap.a.get(0, i, k), 1.0 + x);
                assert_eq!(snap.a.get(1, i, k), -2.0 + t);
                assert_eq!(snap.b.get(1, i, k), 0.1 * x);
                assert_eq!(snap.b.get(3, i, k), 0.2 * libm::sin(t));
            }
        }
    }

    #[test]
    fn scalar_state_example() {
        let sys =
            QuasilinearSystem::new(1, vec![vec![c("1+V1")]], vec![c("1+V1")], vec![vec![c("0")]], vec![vec![c("1")]]).unwrap();
        let g = Grid::periodic(8, 8, 1.0, 0.0).unwrap();
        let v = GridField::from_fn(g, 1, |_, _, _| 0.5);
        let z = GridField::zeros(g, 1);
        let snap = diagonalize_at_state(&sys, &v, &z, &z, 1e-3, 1.0).unwrap();
        assert!(snap.a.data.iter().all(|&a| a == 1.5));
        assert!(snap.b.data.iter().all(|&b| b == 0.0));
        let err = diagonalize_at_state(&sys, &v, &z, &z, 1e-3, 0.25).unwrap_err();
        assert!(matches!(err, FieldError::StateOutOfBox { .. }));
    }

    #[test]
    fn rotation_diagonalizer_matches_finite_differences() {
        // Q = rotation by phi = 0.1 x, A = diag(1, -1), B = 0.
        let sys = QuasilinearSystem::new(
            1,
            vec![vec![c("1"), c("0")], vec![c("0"), c("-1")]],
            vec![c("1"), c("-1")],
            vec![vec![c("0"), c("0")], vec![c("0"), c("0")]],
            vec![vec![c("cos(0.1*x)"), c("-sin(0.1*x)")], vec![c("sin(0.1*x)"), c("cos(0.1*x)")]],
        )
        .unwrap();
        let g = Grid::periodic(8, 8, 1.0, 0.0).unwrap();
        let z = GridField::zeros(g, 2);
        let snap = diagonalize_at_state(&sys, &z, &z, &z, 1e-3, 1.0).unwrap();
        let h = 1e-6;
        let q = |x: f64| {
            let p = 0.1 * x;
            [libm::cos(p), -libm::sin(p), libm::sin(p), libm::cos(p)]
        };
        for i in [1usize, 4, 7] {
            let x = g.x(i);
            let qp = q(x + h);
            let qm = q(x - h);
            let qx: [f64; 4] = core::array::from_fn(|e| (qp[e] - qm[e]) / (2.0 * h));
            // A Q_x with A = diag(1,-1), then Q^{-1} = Q^T
            let aqx = [qx[0], qx[1], -qx[2], -qx[3]];
            let q0 = q(x);
            let qt = [q0[0], q0[2], q0[1], q0[3]];
            for r in 0..2 {
                for cc in 0..2 {
                    let expect = qt[r * 2] * aqx[cc] + qt[r * 2 + 1] * aqx[2 + cc];
                    let got = snap.b.get(r * 2 + cc, i, 3);
                    assert!((got - expect).abs() < 1e-6, "b[{r}][{cc}] {got} vs {expect}");
                }
            }
        }
    }
}
