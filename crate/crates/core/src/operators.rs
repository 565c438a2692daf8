//! Integral operators of the characteristic representation
//!
//! ```text
//! (Cu)_j(x,t) = c_j(x_j,x,t) (Rz)_j(ω_j(x_j,x,t))
//! (Du)_j(x,t) = -∫_{x_j}^x d_j(ξ,x,t) Σ_{k≠j} b_jk u_k (ξ, ω_j(ξ)) dξ
//! F_j(x,t)    =  ∫_{x_j}^x d_j(ξ,x,t) g_j(ξ, ω_j(ξ)) dξ + c_j(x_j,x,t) h_j(ω_j(x_j,x,t))
//! ```
//!
//! and the boundary-trace transfer operators with their norm bounds.
//!
//! Assembly marches column by column away from each family's anchor end.
//! Each node traces one cell back to the previous column with RK4; exit
//! ordinates, weights and path integrals are composed with the previous
//! column by four-point interpolation in time, and so is the boundary
//! term of `C`.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::{BoundaryOperatorSpec, BoundaryPlan, DerivedKind};
use crate::characteristics::{self, CharError};
use crate::expr::Compiled;
use crate::fields::{series_cubic, Coefficients, Grid, GridField};
use crate::par;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OperatorError {
    #[error(transparent)]
    Characteristic(#[from] CharError),
    #[error("field does not match the assembly: {0}")]
    Shape(&'static str),
    #[error("assembly version {found} used where version {expected} is required")]
    VersionMismatch { expected: u64, found: u64 },
    #[error("periodic norm estimate needs a definite sign of b_jj; row {row} has inf b = {inf_b:.3e}, sup b = {sup_b:.3e}")]
    MixedSignB { row: usize, inf_b: f64, sup_b: f64 },
}

/// Interior data: expressions in `(x, t)` or a sampled field.
#[derive(Debug, Clone)]
pub enum Source {
    Exprs(Vec<Compiled>),
    Field(GridField),
}

impl Source {
    pub fn zero(n: usize) -> Source {
        Source::Exprs(vec![Compiled::constant(0.0); n])
    }

    #[inline]
    fn at_node(&self, grid: &Grid, c: usize, i: usize, k: usize) -> f64 {
        match self {
            Source::Exprs(e) => e[c].at(grid.x(i), grid.t(k)),
            Source::Field(f) => f.get(c, i, k),
        }
    }

    #[inline]
    fn at_column(&self, grid: &Grid, c: usize, i: usize, t: f64) -> f64 {
        match self {
            Source::Exprs(e) => e[c].at(grid.x(i), t),
            Source::Field(f) => f.at_node_cubic(c, i, t),
        }
    }

    /// Sup norm over the grid nodes.
    pub fn sup_on(&self, grid: &Grid) -> f64 {
        match self {
            Source::Field(f) => f.sup_norm(),
            Source::Exprs(e) => {
                let mut m = 0.0f64;
                for ex in e {
                    for i in 0..grid.nxn() {
                        for k in 0..grid.ntn() {
                            m = m.max(ex.at(grid.x(i), grid.t(k)).abs());
                        }
                    }
                }
                m
            }
        }
    }

    pub fn sample(&self, grid: &Grid, n: usize) -> GridField {
        match self {
            Source::Field(f) => f.clone(),
            Source::Exprs(_) => GridField::from_fn(*grid, n, |c, x, t| match self {
                Source::Exprs(e) => e[c].at(x, t),
                Source::Field(_) => unreachable!(),
            }),
        }
    }
}

/// Boundary data `h`: expressions in `t` or series on the time nodes.
#[derive(Debug, Clone)]
pub enum BoundarySource {
    Exprs(Vec<Compiled>),
    Series(Vec<Vec<f64>>),
}

impl BoundarySource {
    pub fn zero(n: usize) -> BoundarySource {
        BoundarySource::Exprs(vec![Compiled::constant(0.0); n])
    }

    #[inline]
    pub fn at(&self, grid: &Grid, c: usize, t: f64) -> f64 {
        match self {
            BoundarySource::Exprs(e) => e[c].at(0.0, t),
            BoundarySource::Series(s) => series_cubic(grid, &s[c], t),
        }
    }

    pub fn sup_on(&self, grid: &Grid) -> f64 {
        let n = match self {
            BoundarySource::Exprs(e) => e.len(),
            BoundarySource::Series(s) => s.len(),
        };
        let mut m = 0.0f64;
        for c in 0..n {
            for k in 0..grid.ntn() {
                m = m.max(self.at(grid, c, grid.t(k)).abs());
            }
        }
        m
    }

    pub fn is_zero(&self) -> bool {
        match self {
            BoundarySource::Exprs(e) => e.iter().all(|c| c.is_zero()),
            BoundarySource::Series(s) => s.iter().flatten().all(|v| *v == 0.0),
        }
    }
}

/// Marching data of one family, stored at `i * ntn + k`.
#[derive(Debug, Clone)]
struct Family {
    anchor: usize,
    far: usize,
    /// `+1` when the anchor value is `(Rz)_j + h_j`, `-1` for a reversed
    /// periodic row where it is `z_j - h_j`.
    h_sign: f64,
    reversed: bool,
    /// Foot of the one-cell trace on the previous column.
    tau: Vec<f64>,
    /// `exp ∫ b_jj / a` over the cell.
    cloc: Vec<f64>,
    /// Trapezoid weights for the head and foot integrands (including `d`).
    wh: Vec<f64>,
    wf: Vec<f64>,
    /// `ω_j(anchor) - t`.
    off: Vec<f64>,
    /// `c_j(anchor, x, t)`.
    c: Vec<f64>,
    /// `c^l_j(anchor, far, t)` for `l = 0, 1, 2` on the time nodes.
    far_c: [Vec<f64>; 3],
    /// Coupling `b_jk` at heads and feet, `k * nodes + node`; empty if uncoupled.
    bh: Vec<f64>,
    bf: Vec<f64>,
    /// Sup over nodes of `∫|d_j| dξ` and of `c_j`.
    sup_abs_d: f64,
    sup_c: f64,
}

impl Family {
    #[inline]
    fn prev(&self, i: usize) -> usize {
        if self.anchor == 0 {
            i - 1
        } else {
            i + 1
        }
    }

    fn columns(&self, nx: usize) -> Vec<usize> {
        if self.anchor == 0 {
            (1..=nx).collect()
        } else {
            (0..nx).rev().collect()
        }
    }
}

/// Precomputed operators `C`, `D`, `F` for one coefficient snapshot, one
/// boundary operator and one grid.
#[derive(Debug, Clone)]
pub struct OperatorAssembly {
    grid: Grid,
    n: usize,
    m: usize,
    version: u64,
    coupled: bool,
    fam: Vec<Family>,
    plan: BoundaryPlan,
}

impl OperatorAssembly {
    /// Standard representation: every family is anchored at its exit abscissa.
    pub fn new(
        sys: &dyn Coefficients,
        boundary: &BoundaryOperatorSpec,
        grid: &Grid,
        oversample: usize,
    ) -> Result<OperatorAssembly, OperatorError> {
        OperatorAssembly::with_reversed(sys, boundary, grid, oversample, &vec![false; sys.n()])
    }

    /// As [`OperatorAssembly::new`], but families flagged in `reversed` are
    /// anchored at the opposite end. Only meaningful for periodic boundaries,
    /// where the anchor value is then `u_j(x_j) - h_j`.
    pub fn with_reversed(
        sys: &dyn Coefficients,
        boundary: &BoundaryOperatorSpec,
        grid: &Grid,
        oversample: usize,
        reversed: &[bool],
    ) -> Result<OperatorAssembly, OperatorError> {
        let n = sys.n();
        let m = sys.m();
        if boundary.n() != n || reversed.len() != n {
            return Err(OperatorError::Shape("component count"));
        }
        if reversed.iter().any(|r| *r) && !boundary.is_periodic() {
            return Err(OperatorError::Shape("reversed anchoring needs a periodic boundary"));
        }
        let coupled = sys.has_coupling();
        let mut fam = Vec::with_capacity(n);
        for j in 0..n {
            let exit = if j < m { 0 } else { grid.nx };
            let anchor = if reversed[j] { grid.nx - exit } else { exit };
            fam.push(build_family(sys, grid, j, anchor, reversed[j], oversample.max(1), coupled)?);
        }
        Ok(OperatorAssembly {
            grid: *grid,
            n,
            m,
            version: NEXT_VERSION.fetch_add(1, Ordering::Relaxed),
            coupled,
            fam,
            plan: BoundaryPlan::new(boundary, grid),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn ensure_version(&self, expected: u64) -> Result<(), OperatorError> {
        if expected == self.version {
            Ok(())
        } else {
            Err(OperatorError::VersionMismatch { expected, found: self.version })
        }
    }

    /// Whether `D` can be nonzero.
    pub fn is_coupled(&self) -> bool {
        self.coupled
    }

    pub fn reversed(&self) -> Vec<bool> {
        self.fam.iter().map(|f| f.reversed).collect()
    }

    fn check(&self, u: &GridField) -> Result<(), OperatorError> {
        if u.n != self.n || u.grid != self.grid {
            return Err(OperatorError::Shape("grid or component count"));
        }
        Ok(())
    }

    /// Traces `z_j = u_j(far end, ·)` of a field.
    pub fn traces(&self, u: &GridField) -> Vec<Vec<f64>> {
        (0..self.n).map(|j| u.column(j, self.fam[j].far).to_vec()).collect()
    }

    /// Anchor values `(Rz)_j`, or `z_j` on reversed rows.
    fn anchor_values(&self, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut b = self.plan.apply(z);
        for (j, f) in self.fam.iter().enumerate() {
            if f.reversed {
                b[j] = z[j].clone();
            }
        }
        b
    }

    /// `C` applied to a field.
    pub fn apply_c(&self, u: &GridField) -> Result<GridField, OperatorError> {
        self.check(u)?;
        Ok(self.apply_c_traces(&self.traces(u)))
    }

    /// `C` as a function of the far-end traces only.
    pub fn apply_c_traces(&self, z: &[Vec<f64>]) -> GridField {
        let g = self.grid;
        let ntn = g.ntn();
        let bv = self.anchor_values(z);
        let mut out = GridField::zeros(g, self.n);
        for (j, f) in self.fam.iter().enumerate() {
            let col = &bv[j];
            let vals = par::map(g.nodes(), |node| {
                let k = node % ntn;
                f.c[node] * series_cubic(&g, col, g.t(k) + f.off[node])
            });
            let base = out.idx(j, 0, 0);
            out.data[base..base + g.nodes()].copy_from_slice(&vals);
        }
        out
    }

    /// Trace transfer `(G z)_j(t) = c_j(anchor, far, t) (Rz)_j(ω_j(anchor, far, t))`.
    pub fn transfer(&self, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let g = self.grid;
        let ntn = g.ntn();
        let bv = self.anchor_values(z);
        self.fam
            .iter()
            .enumerate()
            .map(|(j, f)| {
                (0..ntn)
                    .map(|k| {
                        let node = f.far * ntn + k;
                        f.c[node] * series_cubic(&g, &bv[j], g.t(k) + f.off[node])
                    })
                    .collect()
            })
            .collect()
    }

    /// `D u`.
    pub fn apply_d(&self, u: &GridField) -> Result<GridField, OperatorError> {
        self.apply_df(Some(u), None, None)
    }

    /// `F(g, h)`.
    pub fn apply_f(&self, g: &Source, h: &BoundarySource) -> Result<GridField, OperatorError> {
        self.apply_df(None, Some(g), Some(h))
    }

    /// `D u + F(g, h)` in one sweep; absent arguments contribute zero.
    pub fn apply_df(
        &self,
        u: Option<&GridField>,
        g: Option<&Source>,
        h: Option<&BoundarySource>,
    ) -> Result<GridField, OperatorError> {
        if let Some(u) = u {
            self.check(u)?;
        }
        if let Some(Source::Field(f)) = g {
            self.check(f)?;
        }
        let grid = self.grid;
        let ntn = grid.ntn();
        let nodes = grid.nodes();
        let use_u = u.is_some() && self.coupled;
        let mut out = GridField::zeros(grid, self.n);
        for (j, f) in self.fam.iter().enumerate() {
            let head = |i: usize, k: usize| -> f64 {
                let mut s = 0.0;
                if let Some(g) = g {
                    s += g.at_node(&grid, j, i, k);
                }
                if use_u {
                    let u = u.unwrap();
                    let node = i * ntn + k;
                    for kk in 0..self.n {
                        if kk != j {
                            s -= f.bh[kk * nodes + node] * u.get(kk, i, k);
                        }
                    }
                }
                s
            };
            let foot = |ip: usize, node: usize, tau: f64| -> f64 {
                let mut s = 0.0;
                if let Some(g) = g {
                    s += g.at_column(&grid, j, ip, tau);
                }
                if use_u {
                    let u = u.unwrap();
                    for kk in 0..self.n {
                        if kk != j {
                            s -= f.bf[kk * nodes + node] * u.at_node_cubic(kk, ip, tau);
                        }
                    }
                }
                s
            };
            let base = out.idx(j, 0, 0);
            {
                let dst = &mut out.data[base..base + nodes];
                if g.is_some() || use_u {
                    for i in f.columns(grid.nx) {
                        let ip = f.prev(i);
                        let prev: Vec<f64> = dst[ip * ntn..(ip + 1) * ntn].to_vec();
                        let col = par::map(ntn, |k| {
                            let node = i * ntn + k;
                            let tau = f.tau[node];
                            f.cloc[node] * series_cubic(&grid, &prev, tau)
                                + f.wh[node] * head(i, k)
                                + f.wf[node] * foot(ip, node, tau)
                        });
                        dst[i * ntn..(i + 1) * ntn].copy_from_slice(&col);
                    }
                }
                if let Some(h) = h {
                    if !h.is_zero() {
                        for (node, d) in dst.iter_mut().enumerate() {
                            let t = grid.t(node % ntn) + f.off[node];
                            *d += f.h_sign * f.c[node] * h.at(&grid, j, t);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Constant `M` with `‖F(g, h)‖ ≤ M (‖g‖ + ‖h‖)` on the grid.
    pub fn f_bound(&self) -> f64 {
        self.fam.iter().map(|f| f.sup_abs_d.max(f.sup_c)).fold(0.0, f64::max)
    }

    /// `sup_t c^l_j(anchor, far, t)` per row for `l = 0, 1, 2`.
    pub fn transfer_weights(&self) -> Vec<[f64; 3]> {
        self.fam.iter().map(|f| [0, 1, 2].map(|l| f.far_c[l].iter().fold(0.0f64, |a, v| a.max(v.abs())))).collect()
    }
}

fn build_family(
    sys: &dyn Coefficients,
    grid: &Grid,
    j: usize,
    anchor: usize,
    reversed: bool,
    oversample: usize,
    coupled: bool,
) -> Result<Family, OperatorError> {
    let n = sys.n();
    let ntn = grid.ntn();
    let nodes = grid.nodes();
    let far = grid.nx - anchor;
    let mut f = Family {
        anchor,
        far,
        h_sign: if reversed { -1.0 } else { 1.0 },
        reversed,
        tau: vec![0.0; nodes],
        cloc: vec![1.0; nodes],
        wh: vec![0.0; nodes],
        wf: vec![0.0; nodes],
        off: vec![0.0; nodes],
        c: vec![1.0; nodes],
        far_c: [vec![0.0; ntn], vec![0.0; ntn], vec![0.0; ntn]],
        bh: if coupled { vec![0.0; n * nodes] } else { Vec::new() },
        bf: if coupled { vec![0.0; n * nodes] } else { Vec::new() },
        sup_abs_d: 0.0,
        sup_c: 1.0,
    };
    for k in 0..ntn {
        f.tau[anchor * ntn + k] = grid.t(k);
    }
    // Rolling composite quantities on the previous column.
    let mut off_prev = vec![0.0; ntn];
    let mut logc_prev = vec![0.0; ntn];
    let mut lat_prev = vec![0.0; ntn];
    let mut absd_prev = vec![0.0; ntn];
    if coupled {
        for k in 0..ntn {
            let t = grid.t(k);
            for kk in 0..n {
                f.bh[kk * nodes + anchor * ntn + k] = sys.b(j, kk, grid.x(anchor), t);
            }
        }
    }
    struct Local {
        tau: f64,
        cloc: f64,
        wh: f64,
        wf: f64,
        off: f64,
        logc: f64,
        lat: f64,
        absd: f64,
    }
    let columns = f.columns(grid.nx);
    for &i in &columns {
        let ip = f.prev(i);
        let x = grid.x(i);
        let xp = grid.x(ip);
        let s = x - xp;
        let col: Vec<Result<Local, CharError>> = par::map(ntn, |k| {
            let t = grid.t(k);
            let seg = characteristics::segment(sys, j, x, t, xp, oversample)?;
            let tau = seg.omega;
            let cloc = libm::exp(seg.int_b);
            let wh = 0.5 * s / seg.a0;
            let wf = 0.5 * s * cloc / seg.a1;
            let off = tau - t + series_cubic(grid, &off_prev, tau);
            let logc = seg.int_b + series_cubic(grid, &logc_prev, tau);
            let lat = seg.int_at + series_cubic(grid, &lat_prev, tau);
            let absd = cloc * series_cubic(grid, &absd_prev, tau) + wh.abs() + wf.abs();
            Ok(Local { tau, cloc, wh, wf, off, logc, lat, absd })
        });
        for (k, r) in col.into_iter().enumerate() {
            let l = r?;
            let node = i * ntn + k;
            f.tau[node] = l.tau;
            f.cloc[node] = l.cloc;
            f.wh[node] = l.wh;
            f.wf[node] = l.wf;
            f.off[node] = l.off;
            f.c[node] = libm::exp(l.logc);
            f.sup_abs_d = f.sup_abs_d.max(l.absd);
            f.sup_c = f.sup_c.max(f.c[node]);
            off_prev[k] = l.off;
            logc_prev[k] = l.logc;
            lat_prev[k] = l.lat;
            absd_prev[k] = l.absd;
            if coupled {
                let t = grid.t(k);
                for kk in 0..n {
                    f.bh[kk * nodes + node] = sys.b(j, kk, x, t);
                    f.bf[kk * nodes + node] = sys.b(j, kk, xp, l.tau);
                }
            }
        }
    }
    // After the sweep the rolling arrays hold the far column.
    for k in 0..ntn {
        for l in 0..3 {
            f.far_c[l][k] = libm::exp(logc_prev[k] - l as f64 * lat_prev[k]);
        }
    }
    Ok(f)
}

/// Which transfer family a norm estimate refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormFamily {
    /// `G_0, G_1, G_2` for a general boundary operator.
    G,
    /// `H_0, H_1, H_2` for the periodic boundary.
    H,
}

/// Row-wise norm bounds of the transfer operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormEstimates {
    pub family: NormFamily,
    /// `rows[j][l]`: `sup_t |c^l_j| × ‖paired operator row j‖`.
    pub rows: Vec<[f64; 3]>,
    pub max: [f64; 3],
    /// Sampling resolution `(nx, nt)` and RK4 oversampling.
    pub nx: usize,
    pub nt: usize,
    pub oversample: usize,
    /// Rows anchored at the opposite end (periodic rows with negative `b_jj`).
    pub reversed: Vec<bool>,
}

/// `inf` and `sup` of `b_jj` over the grid nodes.
pub fn diagonal_range(sys: &dyn Coefficients, grid: &Grid) -> Vec<(f64, f64)> {
    (0..sys.n())
        .map(|j| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..grid.nxn() {
                for k in 0..grid.ntn() {
                    let b = sys.b(j, j, grid.x(i), grid.t(k));
                    lo = lo.min(b);
                    hi = hi.max(b);
                }
            }
            (lo, hi)
        })
        .collect()
}

/// Dead band for the sign classification of `b_jj`.
pub const SIGN_BAND: f64 = 1e-9;

/// Reversed anchoring for a periodic boundary: rows with `sup b_jj < 0`.
/// Fails if some row has no definite sign.
pub fn periodic_reversal(sys: &dyn Coefficients, grid: &Grid) -> Result<Vec<bool>, OperatorError> {
    diagonal_range(sys, grid)
        .into_iter()
        .enumerate()
        .map(|(j, (lo, hi))| {
            if lo > SIGN_BAND {
                Ok(false)
            } else if hi < -SIGN_BAND {
                Ok(true)
            } else {
                Err(OperatorError::MixedSignB { row: j + 1, inf_b: lo, sup_b: hi })
            }
        })
        .collect()
}

/// Norm bounds of `G_l` (general boundary) or `H_l` (periodic boundary),
/// from full characteristic traces started at every boundary time node.
pub fn estimate_operator_norms(
    sys: &dyn Coefficients,
    boundary: &BoundaryOperatorSpec,
    grid: &Grid,
    oversample: usize,
) -> Result<NormEstimates, OperatorError> {
    let n = sys.n();
    let m = sys.m();
    let (family, reversed, paired) = if boundary.is_periodic() {
        (NormFamily::H, periodic_reversal(sys, grid)?, [vec![1.0; n], vec![1.0; n], vec![1.0; n]])
    } else {
        let p = [
            boundary.row_norms(grid),
            boundary.derived(DerivedKind::Rtilde).row_norms(grid),
            boundary.derived(DerivedKind::Rhat).row_norms(grid),
        ];
        (NormFamily::G, vec![false; n], p)
    };
    let ntn = grid.ntn();
    let mut rows = Vec::with_capacity(n);
    for j in 0..n {
        let exit = characteristics::exit_abscissa(j, m);
        let (anchor, start) = if reversed[j] { (1.0 - exit, exit) } else { (exit, 1.0 - exit) };
        let steps = characteristics::steps_for(1.0, grid.nx, oversample);
        let sups = par::map(ntn, |k| -> Result<[f64; 3], CharError> {
            let seg = characteristics::segment(sys, j, start, grid.t(k), anchor, steps)?;
            Ok([0, 1, 2].map(|l| libm::exp(seg.int_b - l as f64 * seg.int_at)))
        });
        let mut sup = [0.0f64; 3];
        for s in sups {
            let s = s?;
            for l in 0..3 {
                sup[l] = sup[l].max(s[l]);
            }
        }
        rows.push([0, 1, 2].map(|l| sup[l] * paired[l][j]));
    }
    let mut max = [0.0f64; 3];
    for r in &rows {
        for l in 0..3 {
            max[l] = max[l].max(r[l]);
        }
    }
    Ok(NormEstimates { family, rows, max, nx: grid.nx, nt: grid.nt, oversample, reversed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::DiagonalSystem;
    use core::f64::consts::PI;

    fn grid(nx: usize, nt: usize) -> Grid {
        Grid::periodic(nx, nt, 2.0 * PI, 0.0).unwrap()
    }

    #[test]
    fn unit_speed_transport() {
        let sys = DiagonalSystem::parse(1, &["1"], &[&["0"]]).unwrap();
        let g = grid(16, 64);
        let asm = OperatorAssembly::new(&sys, &BoundaryOperatorSpec::Periodic { n: 1 }, &g, 4).unwrap();
        let u = GridField::from_fn(g, 1, |_, x, t| libm::sin(t) * (1.0 + x));
        let cu = asm.apply_c(&u).unwrap();
        for i in 0..=16 {
            for k in (0..64).step_by(7) {
                let (x, t) = (g.x(i), g.t(k));
                let expect = 2.0 * libm::sin(t - x);
                // Four-point interpolation error is of order dt^4 |z''''|.
                assert!((cu.get(0, i, k) - expect).abs() < 1e-5);
            }
        }
        assert!(asm.apply_c(&GridField::zeros(g, 1)).unwrap().sup_norm() == 0.0);
    }

    #[test]
    fn f_of_unit_source_is_x() {
        let sys = DiagonalSystem::parse(1, &["1"], &[&["0"]]).unwrap();
        let g = grid(32, 64);
        let asm = OperatorAssembly::new(&sys, &BoundaryOperatorSpec::Periodic { n: 1 }, &g, 4).unwrap();
        let f = asm.apply_f(&Source::Exprs(vec![Compiled::constant(1.0)]), &BoundarySource::zero(1)).unwrap();
        for i in 0..=32 {
            for k in 0..64 {
                assert!((f.get(0, i, k) - g.x(i)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn coupling_integral() {
        let sys = DiagonalSystem::parse(1, &["1", "-1"], &[&["0", "0.5"], &["0.5", "0"]]).unwrap();
        let g = grid(32, 64);
        let asm = OperatorAssembly::new(&sys, &BoundaryOperatorSpec::Periodic { n: 2 }, &g, 4).unwrap();
        let u = GridField::from_fn(g, 2, |_, _, _| 1.0);
        let du = asm.apply_d(&u).unwrap();
        for i in 0..=32 {
            for k in 0..64 {
                assert!((du.get(0, i, k) + 0.5 * g.x(i)).abs() < 1e-13);
                assert!((du.get(1, i, k) + 0.5 * (1.0 - g.x(i))).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn periodic_h0_bound() {
        let sys = DiagonalSystem::parse(1, &["1", "-1"], &[&["1", "0"], &["0", "1"]]).unwrap();
        let g = grid(32, 64);
        let ne = estimate_operator_norms(&sys, &BoundaryOperatorSpec::Periodic { n: 2 }, &g, 4).unwrap();
        assert_eq!(ne.family, NormFamily::H);
        for r in &ne.rows {
            assert!((r[0] - libm::exp(-1.0)).abs() < 1e-12);
        }
        let mixed = DiagonalSystem::parse(1, &["1"], &[&["sin(t)"]]).unwrap();
        assert!(matches!(
            estimate_operator_norms(&mixed, &BoundaryOperatorSpec::Periodic { n: 1 }, &g, 4),
            Err(OperatorError::MixedSignB { .. })
        ));
    }

    #[test]
    fn autonomous_estimates_coincide() {
        let sys = DiagonalSystem::parse(1, &["1+x", "-2"], &[&["0.5", "0.1"], &["0", "0.3"]]).unwrap();
        let g = grid(16, 32);
        let r = BoundaryOperatorSpec::reflection(&[&["0", "0.6"], &["0.4", "0"]]).unwrap();
        let ne = estimate_operator_norms(&sys, &r, &g, 4).unwrap();
        for row in &ne.rows {
            assert_eq!(row[0], row[1]);
            assert_eq!(row[0], row[2]);
        }
        let asm = OperatorAssembly::new(&sys, &r, &g, 4).unwrap();
        let tw = asm.transfer_weights();
        for (j, row) in ne.rows.iter().enumerate() {
            assert!((tw[j][0] * [0.6, 0.4][j] - row[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn reversed_rows_use_forward_anchor() {
        let sys = DiagonalSystem::parse(1, &["1"], &[&["-1"]]).unwrap();
        let g = grid(16, 64);
        let asm = OperatorAssembly::with_reversed(&sys, &BoundaryOperatorSpec::Periodic { n: 1 }, &g, 4, &[true]).unwrap();
        let tw = asm.transfer_weights();
        assert!((tw[0][0] - libm::exp(-1.0)).abs() < 1e-12);
        let ne = estimate_operator_norms(&sys, &BoundaryOperatorSpec::Periodic { n: 1 }, &g, 4).unwrap();
        assert_eq!(ne.reversed, vec![true]);
        assert!((ne.rows[0][0] - libm::exp(-1.0)).abs() < 1e-12);
    }

    #[test]
    fn transfer_is_c_on_far_column() {
        let sys = DiagonalSystem::parse(1, &["2/(4*pi-1)", "-(2+sin(t))"], &[&["0", "0"], &["0", "0"]]).unwrap();
        let g = Grid::periodic(32, 128, 2.0 * PI, 0.25).unwrap();
        let r = BoundaryOperatorSpec::reflection(&[&["0", "0.8+0.05*sin(t-0.25)"], &["0.9", "0"]]).unwrap();
        let asm = OperatorAssembly::new(&sys, &r, &g, 4).unwrap();
        let u = GridField::from_fn(g, 2, |c, x, t| libm::cos(t + c as f64) * (1.0 + x * x));
        let cu = asm.apply_c(&u).unwrap();
        let tz = asm.transfer(&asm.traces(&u));
        for k in 0..128 {
            assert_eq!(tz[0][k], cu.get(0, 32, k));
            assert_eq!(tz[1][k], cu.get(1, 0, k));
        }
    }
}
