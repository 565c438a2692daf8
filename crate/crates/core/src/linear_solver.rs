//! Fixed-point solution of the linear problem `u = Cu + Du + F(g, h)` and of
//! the differentiated system for `w = ∂_t u`.
//!
//! Routes:
//!
//! * B1 holds: Picard iteration on the whole field.
//! * B2 or B3 holds: each outer step computes `φ = Du + F`, solves the trace
//!   equation `z = Gz + φ|_far` by an inner Picard loop and sets
//!   `u = C[z] + φ`. Under B3 rows with negative `b_jj` are anchored at the
//!   opposite end.
//!
//! Bounded-in-time problems use either a periodic grid or a window whose
//! first `spin_up` time units absorb the truncated history.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::{BoundaryError, BoundaryOperatorSpec, BoundaryPlan, DerivedKind};
use crate::conditions::{condition_report, ConditionError, ConditionOptions, ConditionReport};
use crate::expr::{Compiled, Var};
use crate::fields::{Coefficients, Grid, GridField, TimeTopology};
use crate::math::gauss_solve;
use crate::operators::{periodic_reversal, BoundarySource, OperatorAssembly, OperatorError, Source};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("no dissipativity condition holds (B1 lhs max {b1_lhs:.6}); set allow_unsatisfied to force a Picard solve")]
    ConditionsNotSatisfied { b1_lhs: f64 },
    #[error("iteration is not contracting: residual ratio {ratio:.6} >= {threshold} for {patience} consecutive steps (at iteration {iteration})")]
    NonContraction { iteration: usize, ratio: f64, threshold: f64, patience: usize },
    #[error("tolerance not reached after {iterations} iterations: residual {residual:.3e}")]
    ToleranceNotReached { iterations: usize, residual: f64 },
    #[error("window span {span:.6} after spin-up is shorter than needed for period {period:.6}")]
    WindowTooShort { span: f64, period: f64 },
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error("problem data mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when the sup-norm increment drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Tolerance of the inner trace loop; defaults to `tol / 10`.
    pub inner_tol: Option<f64>,
    /// Residual ratio treated as non-contracting.
    pub stall_ratio: f64,
    /// Consecutive non-contracting steps before giving up.
    pub patience: usize,
    /// RK4 steps per grid cell along characteristics.
    pub oversample: usize,
    /// Safety margin of the norm conditions.
    pub margin: f64,
    /// Solve by plain Picard iteration even if no condition holds.
    pub allow_unsatisfied: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 10_000,
            inner_tol: None,
            stall_ratio: 1.0,
            patience: 50,
            oversample: 4,
            margin: 0.01,
            allow_unsatisfied: false,
        }
    }
}

impl SolverOptions {
    fn inner(&self) -> f64 {
        self.inner_tol.unwrap_or(0.1 * self.tol)
    }

    pub fn condition_options(&self) -> ConditionOptions {
        ConditionOptions { margin: self.margin, oversample: self.oversample }
    }
}

/// A linear problem `u_t + a u_x + b u = g`, `u_j(x_j, t) = (Rz)_j(t) + h_j(t)`.
pub struct LinearProblem<'a> {
    pub system: &'a dyn Coefficients,
    pub boundary: BoundaryOperatorSpec,
    pub g: Source,
    pub h: BoundarySource,
    pub grid: Grid,
    /// Optional transformation `v = q u` in `(x, t)`, row major `q[j][k]`.
    pub q: Option<Vec<Vec<Compiled>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    Picard,
    TraceReduction,
    /// Picard forced without a satisfied condition.
    Unchecked,
}

/// Surrogate of the a-priori estimate `‖u‖ ≤ K (‖g‖ + ‖h‖)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AprioriCheck {
    pub u_sup: f64,
    pub data_sup: f64,
    pub f_bound: f64,
    /// `f_bound / (1 - ratio)`; infinite if the ratio is not below one.
    pub k: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub u: GridField,
    pub v: Option<GridField>,
    pub route: Route,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub residuals: Vec<f64>,
    /// Largest residual ratio over the iterations above the noise floor.
    pub ratio: f64,
    pub apriori: AprioriCheck,
    pub conditions: ConditionReport,
    pub w: Option<GridField>,
    /// Set when the derivative field was computed without the `i = 1` norm condition.
    pub regularity_uncertified: bool,
    pub warnings: Vec<String>,
}

/// Outcome of a fixed-point run on an assembly.
#[derive(Debug, Clone)]
pub struct Iteration {
    pub u: GridField,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub residuals: Vec<f64>,
    pub ratio: f64,
}

/// Residual bookkeeping shared by all loops.
struct Monitor {
    threshold: f64,
    patience: usize,
    floor: f64,
    stalled: usize,
    last: Option<f64>,
    worst: f64,
}

impl Monitor {
    fn new(opts: &SolverOptions, tol: f64) -> Monitor {
        Monitor { threshold: opts.stall_ratio, patience: opts.patience, floor: 10.0 * tol, stalled: 0, last: None, worst: 0.0 }
    }

    fn push(&mut self, res: f64, iteration: usize) -> Result<(), SolveError> {
        if !res.is_finite() {
            return Err(SolveError::NonContraction { iteration, ratio: f64::INFINITY, threshold: self.threshold, patience: 0 });
        }
        if let Some(prev) = self.last {
            if prev > self.floor && res > self.floor {
                let r = res / prev;
                self.worst = self.worst.max(r);
                if r >= self.threshold {
                    self.stalled += 1;
                    if self.stalled >= self.patience {
                        return Err(SolveError::NonContraction {
                            iteration,
                            ratio: r,
                            threshold: self.threshold,
                            patience: self.patience,
                        });
                    }
                } else {
                    self.stalled = 0;
                }
            }
        }
        self.last = Some(res);
        Ok(())
    }
}

fn sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

/// Picard iteration `u ← Cu + Du + F` from `u = 0`.
pub fn picard(asm: &OperatorAssembly, g: &Source, h: &BoundarySource, opts: &SolverOptions) -> Result<Iteration, SolveError> {
    let f = asm.apply_df(None, Some(g), Some(h))?;
    let mut u = GridField::zeros(*asm.grid(), asm.n());
    let mut mon = Monitor::new(opts, opts.tol);
    let mut residuals = Vec::new();
    for it in 1..=opts.max_iter {
        let mut next = asm.apply_c(&u)?;
        if asm.is_coupled() {
            next.scaled_add(1.0, &asm.apply_d(&u)?);
        }
        next.scaled_add(1.0, &f);
        let res = next.max_abs_diff(&u);
        residuals.push(res);
        u = next;
        mon.push(res, it)?;
        if res < opts.tol {
            return Ok(Iteration { u, iterations: it, inner_iterations: 0, residuals, ratio: mon.worst });
        }
    }
    Err(SolveError::ToleranceNotReached { iterations: opts.max_iter, residual: *residuals.last().unwrap_or(&f64::NAN) })
}

/// Solves the trace equation `z = G z + r` by Picard iteration from `z0`.
pub fn solve_traces(
    asm: &OperatorAssembly,
    r: &[Vec<f64>],
    z0: Vec<Vec<f64>>,
    opts: &SolverOptions,
) -> Result<(Vec<Vec<f64>>, usize), SolveError> {
    let tol = opts.inner();
    let mut mon = Monitor::new(opts, tol);
    let mut z = z0;
    for it in 1..=opts.max_iter {
        let mut next = asm.transfer(&z);
        for (nj, rj) in next.iter_mut().zip(r) {
            for (a, b) in nj.iter_mut().zip(rj) {
                *a += b;
            }
        }
        let res = sup_diff(&next, &z);
        z = next;
        mon.push(res, it)?;
        if res < tol {
            return Ok((z, it));
        }
    }
    Err(SolveError::ToleranceNotReached { iterations: opts.max_iter, residual: f64::NAN })
}

/// Outer iteration through the trace equation: `u = C[(I-G)^{-1} φ|_far] + φ`, `φ = Du + F`.
pub fn trace_reduction(
    asm: &OperatorAssembly,
    g: &Source,
    h: &BoundarySource,
    opts: &SolverOptions,
) -> Result<Iteration, SolveError> {
    let f = asm.apply_df(None, Some(g), Some(h))?;
    let mut u = GridField::zeros(*asm.grid(), asm.n());
    let mut mon = Monitor::new(opts, opts.tol);
    let mut residuals = Vec::new();
    let mut inner = 0;
    let mut z = asm.traces(&u);
    for it in 1..=opts.max_iter {
        let phi = if asm.is_coupled() {
            let mut d = asm.apply_d(&u)?;
            d.scaled_add(1.0, &f);
            d
        } else {
            f.clone()
        };
        let r = asm.traces(&phi);
        let (zs, k) = solve_traces(asm, &r, z, opts)?;
        inner += k;
        let mut next = asm.apply_c_traces(&zs);
        next.scaled_add(1.0, &phi);
        z = zs;
        let res = next.max_abs_diff(&u);
        residuals.push(res);
        u = next;
        mon.push(res, it)?;
        if res < opts.tol {
            return Ok(Iteration { u, iterations: it, inner_iterations: inner, residuals, ratio: mon.worst });
        }
    }
    Err(SolveError::ToleranceNotReached { iterations: opts.max_iter, residual: *residuals.last().unwrap_or(&f64::NAN) })
}

/// Route and anchoring chosen from a condition report.
pub fn select_route(
    sys: &dyn Coefficients,
    boundary: &BoundaryOperatorSpec,
    grid: &Grid,
    conditions: &ConditionReport,
    opts: &SolverOptions,
) -> Result<(Route, Vec<bool>), SolveError> {
    let n = sys.n();
    if conditions.b1 {
        Ok((Route::Picard, vec![false; n]))
    } else if conditions.b2 {
        Ok((Route::TraceReduction, vec![false; n]))
    } else if conditions.b3 == Some(true) {
        Ok((Route::TraceReduction, periodic_reversal(sys, grid)?))
    } else if opts.allow_unsatisfied {
        let _ = boundary;
        Ok((Route::Unchecked, vec![false; n]))
    } else {
        Err(SolveError::ConditionsNotSatisfied { b1_lhs: conditions.b1_bound() })
    }
}

/// Runs the chosen route on an assembly.
pub fn run_route(
    asm: &OperatorAssembly,
    route: Route,
    g: &Source,
    h: &BoundarySource,
    opts: &SolverOptions,
) -> Result<Iteration, SolveError> {
    match route {
        Route::Picard | Route::Unchecked => picard(asm, g, h, opts),
        Route::TraceReduction => trace_reduction(asm, g, h, opts),
    }
}

fn check_problem(p: &LinearProblem<'_>) -> Result<(), SolveError> {
    let n = p.system.n();
    if p.boundary.n() != n {
        return Err(SolveError::Shape(format!("boundary has {} rows, system has {n}", p.boundary.n())));
    }
    match &p.g {
        Source::Exprs(e) if e.len() != n => return Err(SolveError::Shape(format!("g has {} components, expected {n}", e.len()))),
        Source::Field(f) if f.n != n || f.grid != p.grid => {
            return Err(SolveError::Shape("g field does not match the grid".into()))
        }
        _ => {}
    }
    match &p.h {
        BoundarySource::Exprs(e) if e.len() != n => {
            return Err(SolveError::Shape(format!("h has {} components, expected {n}", e.len())))
        }
        BoundarySource::Series(s) if s.len() != n || s.iter().any(|c| c.len() != p.grid.ntn()) => {
            return Err(SolveError::Shape("h series does not match the grid".into()))
        }
        _ => {}
    }
    if let Some(q) = &p.q {
        if q.len() != n || q.iter().any(|r| r.len() != n) {
            return Err(SolveError::Shape("q must be n x n".into()));
        }
    }
    Ok(())
}

/// Solves the linear problem after checking the dissipativity conditions.
pub fn solve_linear(p: &LinearProblem<'_>, opts: &SolverOptions) -> Result<SolveReport, SolveError> {
    check_problem(p)?;
    p.boundary.validate(&p.grid)?;
    let conditions = condition_report(p.system, &p.boundary, &p.grid, &opts.condition_options())?;
    let (route, reversed) = select_route(p.system, &p.boundary, &p.grid, &conditions, opts)?;
    let mut warnings = Vec::new();
    if route == Route::Unchecked {
        warnings.push(String::from("no dissipativity condition holds; Picard iteration forced"));
    }
    let asm = OperatorAssembly::with_reversed(p.system, &p.boundary, &p.grid, opts.oversample, &reversed)?;
    let it = run_route(&asm, route, &p.g, &p.h, opts)?;
    let data_sup = p.g.sup_on(&p.grid) + p.h.sup_on(&p.grid);
    let u_sup = it.u.sup_norm();
    let f_bound = asm.f_bound();
    let k = if it.ratio < 1.0 { f_bound / (1.0 - it.ratio) } else { f64::INFINITY };
    let apriori = AprioriCheck { u_sup, data_sup, f_bound, k, holds: u_sup <= k * data_sup * (1.0 + 1e-9) + opts.tol };
    let v = p.q.as_ref().map(|q| transform(q, &it.u));
    Ok(SolveReport {
        u: it.u,
        v,
        route,
        iterations: it.iterations,
        inner_iterations: it.inner_iterations,
        residuals: it.residuals,
        ratio: it.ratio,
        apriori,
        conditions,
        w: None,
        regularity_uncertified: false,
        warnings,
    })
}

/// `q u` at every node.
fn transform(q: &[Vec<Compiled>], u: &GridField) -> GridField {
    let n = u.n;
    let g = u.grid;
    let mut out = GridField::zeros(g, n);
    for i in 0..g.nxn() {
        let x = g.x(i);
        for k in 0..g.ntn() {
            let t = g.t(k);
            for j in 0..n {
                let s: f64 = (0..n).map(|l| q[j][l].at(x, t) * u.get(l, i, k)).sum();
                out.set(j, i, k, s);
            }
        }
    }
    out
}

/// Coefficients of the differentiated system: same speeds,
/// `b¹ = b - diag(a_t / a)`.
pub struct DerivativeSystem<'a> {
    pub base: &'a dyn Coefficients,
}

impl Coefficients for DerivativeSystem<'_> {
    fn n(&self) -> usize {
        self.base.n()
    }
    fn m(&self) -> usize {
        self.base.m()
    }
    fn a(&self, j: usize, x: f64, t: f64) -> f64 {
        self.base.a(j, x, t)
    }
    fn a_t(&self, j: usize, x: f64, t: f64) -> f64 {
        self.base.a_t(j, x, t)
    }
    fn b(&self, j: usize, k: usize, x: f64, t: f64) -> f64 {
        let b = self.base.b(j, k, x, t);
        if j == k {
            b - self.base.a_t(j, x, t) / self.base.a(j, x, t)
        } else {
            b
        }
    }
    fn b_t(&self, j: usize, k: usize, x: f64, t: f64) -> f64 {
        let bt = self.base.b_t(j, k, x, t);
        if j != k {
            return bt;
        }
        // Second time derivative of `a` by a central difference of `a_t`.
        let h = 1e-5 * (1.0 + t.abs());
        let att = (self.base.a_t(j, x, t + h) - self.base.a_t(j, x, t - h)) / (2.0 * h);
        let a = self.base.a(j, x, t);
        let at = self.base.a_t(j, x, t);
        bt - (att * a - at * at) / (a * a)
    }
    fn has_coupling(&self) -> bool {
        self.base.has_coupling()
    }
}

/// Right-hand side `g¹ = g_t - b_t u + diag(a_t / a) (b u - g)` on the grid.
fn derivative_source(sys: &dyn Coefficients, g: &Source, u: &GridField) -> GridField {
    let grid = u.grid;
    let n = u.n;
    let (gv, gt) = match g {
        Source::Exprs(e) => {
            let gt: Vec<Compiled> = e.iter().map(|c| c.diff(Var::T)).collect();
            (Source::Exprs(e.clone()).sample(&grid, n), Source::Exprs(gt).sample(&grid, n))
        }
        Source::Field(f) => (f.clone(), f.dt_central()),
    };
    let mut out = GridField::zeros(grid, n);
    for i in 0..grid.nxn() {
        let x = grid.x(i);
        for k in 0..grid.ntn() {
            let t = grid.t(k);
            for j in 0..n {
                let mut bu = 0.0;
                let mut btu = 0.0;
                for l in 0..n {
                    let ul = u.get(l, i, k);
                    bu += sys.b(j, l, x, t) * ul;
                    btu += sys.b_t(j, l, x, t) * ul;
                }
                let ratio = sys.a_t(j, x, t) / sys.a(j, x, t);
                out.set(j, i, k, gt.get(j, i, k) - btu + ratio * (bu - gv.get(j, i, k)));
            }
        }
    }
    out
}

/// Time derivative of a series on the grid's time nodes.
fn series_dt(grid: &Grid, s: &[f64]) -> Vec<f64> {
    let ntn = s.len();
    let dt = grid.dt();
    (0..ntn)
        .map(|k| {
            if grid.is_periodic() {
                (s[(k + 1) % ntn] - s[(k + ntn - 1) % ntn]) / (2.0 * dt)
            } else if k == 0 {
                (-3.0 * s[0] + 4.0 * s[1] - s[2]) / (2.0 * dt)
            } else if k == ntn - 1 {
                (3.0 * s[k] - 4.0 * s[k - 1] + s[k - 2]) / (2.0 * dt)
            } else {
                (s[k + 1] - s[k - 1]) / (2.0 * dt)
            }
        })
        .collect()
}

/// Boundary data `h¹ = R'z + h'` of the differentiated system.
fn derivative_boundary(p: &LinearProblem<'_>, reversed: &[bool], u: &GridField) -> BoundarySource {
    let grid = p.grid;
    let n = u.n;
    let m = p.system.m();
    let z: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let exit = if j < m { 0 } else { grid.nx };
            let far = if reversed[j] { exit } else { grid.nx - exit };
            u.column(j, far).to_vec()
        })
        .collect();
    let mut h1 = BoundaryPlan::new(&p.boundary.derived(DerivedKind::Rprime), &grid).apply(&z);
    if p.boundary.is_periodic() {
        for row in h1.iter_mut() {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    for (j, row) in h1.iter_mut().enumerate() {
        let hp: Vec<f64> = match &p.h {
            BoundarySource::Exprs(e) => {
                let d = e[j].diff(Var::T);
                (0..grid.ntn()).map(|k| d.at(0.0, grid.t(k))).collect()
            }
            BoundarySource::Series(s) => series_dt(&grid, &s[j]),
        };
        for (a, b) in row.iter_mut().zip(hp) {
            *a += b;
        }
    }
    BoundarySource::Series(h1)
}

/// Outcome of the derivative solve.
#[derive(Debug, Clone)]
pub struct DerivativeReport {
    /// `w ≈ ∂_t u` (or `q^{-1} ∂_t v` when `q` is given).
    pub w: GridField,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub ratio: f64,
    pub regularity_uncertified: bool,
}

/// Solves the differentiated system in integral form for `w = ∂_t u`, with
/// boundary operator `R̃` and trace equation driven by the `G_1` transfer.
pub fn solve_derivative_field(
    p: &LinearProblem<'_>,
    u: &GridField,
    opts: &SolverOptions,
) -> Result<DerivativeReport, SolveError> {
    check_problem(p)?;
    if u.grid != p.grid || u.n != p.system.n() {
        return Err(SolveError::Shape("solution field does not match the problem".into()));
    }
    let conditions = condition_report(p.system, &p.boundary, &p.grid, &opts.condition_options())?;
    let uncertified = !conditions.norm_checks.map_or(false, |c| c[0].pass);
    let reversed = if p.boundary.is_periodic() && !conditions.b1 {
        periodic_reversal(p.system, &p.grid).unwrap_or_else(|_| vec![false; p.system.n()])
    } else {
        vec![false; p.system.n()]
    };
    let wsys = DerivativeSystem { base: p.system };
    let tilde = p.boundary.derived(DerivedKind::Rtilde);
    let asm = OperatorAssembly::with_reversed(&wsys, &tilde, &p.grid, opts.oversample, &reversed)?;
    let g1 = Source::Field(derivative_source(p.system, &p.g, u));
    let h1 = derivative_boundary(p, &reversed, u);
    let it = trace_reduction(&asm, &g1, &h1, opts)?;
    let w = match &p.q {
        None => it.u,
        Some(q) => add_q_correction(q, u, it.u),
    };
    Ok(DerivativeReport {
        w,
        iterations: it.iterations,
        inner_iterations: it.inner_iterations,
        ratio: it.ratio,
        regularity_uncertified: uncertified,
    })
}

/// `w + q^{-1} q_t u`.
fn add_q_correction(q: &[Vec<Compiled>], u: &GridField, mut w: GridField) -> GridField {
    let n = u.n;
    let g = u.grid;
    let qt: Vec<Vec<Compiled>> = q.iter().map(|r| r.iter().map(|c| c.diff(Var::T)).collect()).collect();
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for i in 0..g.nxn() {
        let x = g.x(i);
        for k in 0..g.ntn() {
            let t = g.t(k);
            for r in 0..n {
                b[r] = (0..n).map(|l| qt[r][l].at(x, t) * u.get(l, i, k)).sum();
                for c in 0..n {
                    a[r * n + c] = q[r][c].at(x, t);
                }
            }
            gauss_solve(n, &mut a, &mut b, 1);
            for j in 0..n {
                let idx = w.idx(j, i, k);
                w.data[idx] += b[j];
            }
        }
    }
    w
}

/// Solves the problem and then the derivative system, attaching `w`.
pub fn solve_with_derivative(p: &LinearProblem<'_>, opts: &SolverOptions) -> Result<SolveReport, SolveError> {
    let mut rep = solve_linear(p, opts)?;
    let d = solve_derivative_field(p, &rep.u, opts)?;
    rep.regularity_uncertified = d.regularity_uncertified;
    if d.regularity_uncertified {
        rep.warnings.push(String::from("derivative field computed without the i = 1 norm condition"));
    }
    rep.w = Some(d.w);
    Ok(rep)
}

/// Time nodes at the top of a window whose interpolation stencils are one-sided.
pub const WINDOW_EDGE_NODES: usize = 8;

/// `max_{c,x} sup_t |u(x, t + T) - u(x, t)|` over the diagnostic range.
/// Zero for a periodic grid.
pub fn verify_periodicity(u: &GridField, period: f64) -> Result<f64, SolveError> {
    let g = u.grid;
    let TimeTopology::Window { t_hi, .. } = g.topology else { return Ok(0.0) };
    let lo = g.diagnostic_t_lo();
    let span = t_hi - lo;
    if span < period || t_hi - g.t(0) < 2.0 * period {
        return Err(SolveError::WindowTooShort { span, period });
    }
    let dt = g.dt();
    let shift = period / dt;
    let whole = libm::round(shift);
    let aligned = (shift - whole).abs() < 1e-9;
    let last = g.nt - WINDOW_EDGE_NODES;
    let mut defect = 0.0f64;
    for c in 0..u.n {
        for i in 0..g.nxn() {
            let col = u.column(c, i);
            for k in g.diagnostic_nodes() {
                let later = if aligned {
                    let kk = k + whole as usize;
                    if kk > last {
                        break;
                    }
                    col[kk]
                } else {
                    let t = g.t(k) + period;
                    if t > g.t(last) {
                        break;
                    }
                    u.at_node_cubic(c, i, t)
                };
                defect = defect.max((later - col[k]).abs());
            }
        }
    }
    Ok(defect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::DiagonalSystem;
    use core::f64::consts::PI;

    fn c(s: &str) -> Compiled {
        Compiled::parse(s).unwrap()
    }

    fn unit_system() -> DiagonalSystem {
        DiagonalSystem::parse(1, &["1"], &[&["1"]]).unwrap()
    }

    /// `u = x sin t` for `a = 1`, `b = 1`, `R = 0.5 z`.
    fn manufactured(sys: &DiagonalSystem, nx: usize, nt: usize) -> LinearProblem<'_> {
        LinearProblem {
            system: sys,
            boundary: BoundaryOperatorSpec::reflection(&[&["0.5"]]).unwrap(),
            g: Source::Exprs(vec![c("x*cos(t)+sin(t)+x*sin(t)")]),
            h: BoundarySource::Exprs(vec![c("-0.5*sin(t)")]),
            grid: Grid::periodic(nx, nt, 2.0 * PI, 0.0).unwrap(),
            q: None,
        }
    }

    #[test]
    fn zero_data_one_iteration() {
        let sys = unit_system();
        let mut p = manufactured(&sys, 16, 32);
        p.g = Source::zero(1);
        p.h = BoundarySource::zero(1);
        let r = solve_linear(&p, &SolverOptions::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.u.sup_norm(), 0.0);
        let d = solve_derivative_field(&p, &r.u, &SolverOptions::default()).unwrap();
        assert_eq!(d.w.sup_norm(), 0.0);
    }

    #[test]
    fn manufactured_second_order() {
        let sys = unit_system();
        let mut errs = Vec::new();
        for n in [32usize, 64] {
            let p = manufactured(&sys, n, n);
            let r = solve_linear(&p, &SolverOptions::default()).unwrap();
            assert_eq!(r.route, Route::Picard);
            let exact = GridField::from_fn(p.grid, 1, |_, x, t| x * libm::sin(t));
            errs.push(r.u.max_abs_diff(&exact));
            assert!(r.ratio <= r.conditions.b1_bound() + 0.05);
            assert!(r.apriori.holds);
        }
        let order = libm::log2(errs[0] / errs[1]);
        assert!(order > 1.8, "order {order}, errors {errs:?}");
    }

    #[test]
    fn trace_route_agrees_with_picard() {
        let sys = unit_system();
        let p = manufactured(&sys, 32, 32);
        let asm = OperatorAssembly::new(p.system, &p.boundary, &p.grid, 4).unwrap();
        let a = picard(&asm, &p.g, &p.h, &SolverOptions::default()).unwrap();
        let b = trace_reduction(&asm, &p.g, &p.h, &SolverOptions::default()).unwrap();
        assert!(a.u.max_abs_diff(&b.u) < 1e-9);
    }

    #[test]
    fn derivative_matches_exact() {
        let sys = unit_system();
        let p = manufactured(&sys, 64, 64);
        let r = solve_with_derivative(&p, &SolverOptions::default()).unwrap();
        let exact = GridField::from_fn(p.grid, 1, |_, x, t| x * libm::cos(t));
        assert!(r.w.unwrap().max_abs_diff(&exact) < 2e-2);
        assert!(!r.regularity_uncertified);
    }

    #[test]
    fn b2_route_with_large_reflection() {
        // ‖R‖ = 1.5 violates B1; strong damping makes B2 hold.
        let sys = DiagonalSystem::parse(1, &["1"], &[&["2"]]).unwrap();
        let p = LinearProblem {
            system: &sys,
            boundary: BoundaryOperatorSpec::reflection(&[&["1.5"]]).unwrap(),
            g: Source::Exprs(vec![c("cos(t)")]),
            h: BoundarySource::zero(1),
            grid: Grid::periodic(32, 64, 2.0 * PI, 0.0).unwrap(),
            q: None,
        };
        let r = solve_linear(&p, &SolverOptions::default()).unwrap();
        assert_eq!(r.route, Route::TraceReduction);
        let asm = OperatorAssembly::new(&sys, &p.boundary, &p.grid, 4).unwrap();
        let mut res = asm.apply_c(&r.u).unwrap();
        res.scaled_add(1.0, &asm.apply_f(&p.g, &p.h).unwrap());
        assert!(res.max_abs_diff(&r.u) < 1e-9);
    }

    #[test]
    fn b3_route_reverses_negative_rows() {
        let sys = DiagonalSystem::parse(1, &["1"], &[&["-1"]]).unwrap();
        let p = LinearProblem {
            system: &sys,
            boundary: BoundaryOperatorSpec::Periodic { n: 1 },
            g: Source::Exprs(vec![c("-x*cos(t)-sin(t)+x*sin(t)")]),
            h: BoundarySource::Exprs(vec![c("sin(t)")]),
            grid: Grid::periodic(64, 64, 2.0 * PI, 0.0).unwrap(),
            q: None,
        };
        // u = -x sin t: u(0) = u(1) + h.
        let r = solve_linear(&p, &SolverOptions::default()).unwrap();
        assert_eq!(r.route, Route::TraceReduction);
        let exact = GridField::from_fn(p.grid, 1, |_, x, t| -x * libm::sin(t));
        assert!(r.u.max_abs_diff(&exact) < 1e-2);
    }

    #[test]
    fn unsatisfied_conditions_are_refused() {
        let sys = DiagonalSystem::parse(1, &["1"], &[&["0"]]).unwrap();
        let p = LinearProblem {
            system: &sys,
            boundary: BoundaryOperatorSpec::reflection(&[&["1.2"]]).unwrap(),
            g: Source::zero(1),
            h: BoundarySource::zero(1),
            grid: Grid::periodic(16, 32, 2.0 * PI, 0.0).unwrap(),
            q: None,
        };
        assert!(matches!(solve_linear(&p, &SolverOptions::default()), Err(SolveError::ConditionsNotSatisfied { .. })));
        let forced = SolverOptions { allow_unsatisfied: true, ..SolverOptions::default() };
        let mut p2 = p;
        p2.g = Source::Exprs(vec![c("1")]);
        assert!(matches!(solve_linear(&p2, &forced), Err(SolveError::NonContraction { .. })));
    }

    #[test]
    fn periodicity_on_periodic_grid_is_zero() {
        let g = Grid::periodic(8, 16, 1.0, 0.0).unwrap();
        assert_eq!(verify_periodicity(&GridField::zeros(g, 1), 1.0).unwrap(), 0.0);
        let w = Grid::window(8, 30, 0.0, 3.0, 1.0).unwrap();
        assert!(matches!(verify_periodicity(&GridField::zeros(w, 1), 2.0), Err(SolveError::WindowTooShort { .. })));
    }
}
