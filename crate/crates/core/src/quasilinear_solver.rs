//! Outer iteration for `V_t + A(x,t,V) V_x + B(x,t,V) V = f` with boundary
//! conditions on the Riemann variables `U = Q^{-1}(x,t,V) V`.
//!
//! Starting from `V⁰ = 0`, each step freezes the coefficients at `V^k`,
//! solves the linear problem for `U^{k+1}` and sets `V^{k+1} = Q(V^k) U^{k+1}`.
//! The derivatives of `V^k` entering the frozen coupling are central
//! differences on the grid.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::BoundaryOperatorSpec;
use crate::conditions::{condition_report, ConditionError, ConditionReport};
use crate::expr::Compiled;
use crate::fields::{
    diagonalize_at_state, validate_hyperbolicity, Coefficients, FieldError, Grid, GridCoefficients, GridField,
    HyperbolicityReport, QuasilinearSystem,
};
use crate::linear_solver::{
    run_route, select_route, solve_linear, verify_periodicity, LinearProblem, Route, SolveError, SolverOptions,
};
use crate::operators::{BoundarySource, OperatorAssembly, Source};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuasilinearError {
    #[error("outer iteration diverges: increments grew for {patience} consecutive steps (last C1 increment {increment:.3e} at k = {k})")]
    OuterDivergence { k: usize, increment: f64, patience: usize },
    #[error("iterate V^{k} left the state box: |V| = {norm:.6e} > delta0 = {delta0:.3e}")]
    StateLeftBox { k: usize, norm: f64, delta0: f64 },
    #[error("data size {data:.3e} exceeds the smallness gate {gate:.3e}")]
    DataTooLarge { data: f64, gate: f64 },
    #[error("no dissipativity condition holds for the linearization at V = 0")]
    ConditionsAtZero,
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Linear(#[from] SolveError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error("problem data mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuasilinearOptions {
    /// Options of every inner linear solve.
    pub linear: SolverOptions,
    /// Stop when the C¹ increment drops below this.
    pub tol: f64,
    pub max_outer: usize,
    /// State box radius.
    pub delta0: f64,
    /// Hyperbolicity and `|det Q|` threshold.
    pub lambda0: f64,
    /// Gate factor: data must satisfy `‖f‖ + ‖h‖ ≤ smallness · margin`, with
    /// `margin` the hyperbolicity margin at `V = 0`.
    pub smallness: f64,
    pub skip_smallness_gate: bool,
    /// Consecutive growing increments before giving up.
    pub divergence_patience: usize,
    /// Period to verify on the converged iterate.
    pub period: Option<f64>,
}

impl Default for QuasilinearOptions {
    fn default() -> Self {
        QuasilinearOptions {
            linear: SolverOptions::default(),
            tol: 1e-8,
            max_outer: 60,
            delta0: 1.0,
            lambda0: 1e-3,
            smallness: 0.05,
            skip_smallness_gate: false,
            divergence_patience: 5,
            period: None,
        }
    }
}

/// A quasilinear problem. `h` and the boundary operator act on `U`.
pub struct QuasilinearProblem<'a> {
    pub system: &'a QuasilinearSystem,
    pub boundary: BoundaryOperatorSpec,
    pub f: Vec<Compiled>,
    pub h: BoundarySource,
    pub grid: Grid,
}

/// Iterate `k` with its frozen coefficients.
#[derive(Debug, Clone)]
pub struct QuasilinearState {
    pub k: usize,
    pub v: GridField,
    pub u: GridField,
    pub v_t: GridField,
    pub v_x: GridField,
    pub c0_increments: Vec<f64>,
    pub c1_increments: Vec<f64>,
    /// Coefficients frozen at `V^{k-1}`, absent for `k = 0`.
    pub frozen: Option<GridCoefficients>,
}

impl QuasilinearState {
    pub fn zero(grid: Grid, n: usize) -> QuasilinearState {
        let z = GridField::zeros(grid, n);
        QuasilinearState {
            k: 0,
            v: z.clone(),
            u: z.clone(),
            v_t: z.clone(),
            v_x: z,
            c0_increments: Vec::new(),
            c1_increments: Vec::new(),
            frozen: None,
        }
    }
}

/// Progress record of one outer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterStep {
    pub k: usize,
    pub c0_increment: f64,
    pub c1_increment: f64,
    pub inner_iterations: usize,
    pub v_sup: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuasilinearReport {
    pub v: GridField,
    pub u: GridField,
    pub steps: Vec<OuterStep>,
    pub converged: bool,
    /// Median ratio of consecutive C⁰ increments above the noise floor.
    pub outer_ratio: Option<f64>,
    pub route: Route,
    pub conditions_at_zero: ConditionReport,
    pub hyperbolicity_at_zero: HyperbolicityReport,
    pub data_norm: f64,
    pub gate: f64,
    pub periodicity_defect: Option<f64>,
    pub warnings: Vec<String>,
}

/// Linear route fixed by the linearization at zero.
struct Plan {
    route: Route,
    reversed: Vec<bool>,
    linear: SolverOptions,
}

fn check_problem(p: &QuasilinearProblem<'_>) -> Result<(), QuasilinearError> {
    let n = p.system.n;
    if p.boundary.n() != n {
        return Err(QuasilinearError::Shape(format!("boundary has {} rows, system has {n}", p.boundary.n())));
    }
    if p.f.len() != n {
        return Err(QuasilinearError::Shape(format!("f has {} components, expected {n}", p.f.len())));
    }
    match &p.h {
        BoundarySource::Exprs(e) if e.len() != n => {
            Err(QuasilinearError::Shape(format!("h has {} components, expected {n}", e.len())))
        }
        BoundarySource::Series(s) if s.len() != n || s.iter().any(|c| c.len() != p.grid.ntn()) => {
            Err(QuasilinearError::Shape("h series does not match the grid".into()))
        }
        _ => Ok(()),
    }
}

fn freeze(
    p: &QuasilinearProblem<'_>,
    s: &QuasilinearState,
    opts: &QuasilinearOptions,
) -> Result<GridCoefficients, QuasilinearError> {
    let coeffs = diagonalize_at_state(p.system, &s.v, &s.v_t, &s.v_x, opts.lambda0, opts.delta0).map_err(|e| match e {
        FieldError::StateOutOfBox { norm, delta0 } => QuasilinearError::StateLeftBox { k: s.k, norm, delta0 },
        other => QuasilinearError::Field(other),
    })?;
    validate_hyperbolicity(&coeffs, &p.grid, opts.lambda0, None)?;
    Ok(coeffs)
}

fn sup_diff_sum(a: &QuasilinearState, v: &GridField, v_t: &GridField, v_x: &GridField) -> (f64, f64) {
    let c0 = v.max_abs_diff(&a.v);
    (c0, c0 + v_t.max_abs_diff(&a.v_t) + v_x.max_abs_diff(&a.v_x))
}

fn step(
    p: &QuasilinearProblem<'_>,
    s: &QuasilinearState,
    plan: &Plan,
    opts: &QuasilinearOptions,
) -> Result<(QuasilinearState, usize), QuasilinearError> {
    let coeffs = freeze(p, s, opts)?;
    let g = Source::Field(coeffs.transform_rhs(&p.f));
    let asm = OperatorAssembly::with_reversed(&coeffs, &p.boundary, &p.grid, plan.linear.oversample, &plan.reversed)
        .map_err(SolveError::from)?;
    let it = run_route(&asm, plan.route, &g, &p.h, &plan.linear)?;
    let v = coeffs.to_state(&it.u);
    let norm = v.sup_norm();
    if !(norm <= opts.delta0) {
        return Err(QuasilinearError::StateLeftBox { k: s.k + 1, norm, delta0: opts.delta0 });
    }
    let v_t = v.dt_central();
    let v_x = v.dx_central();
    let (c0, c1) = sup_diff_sum(s, &v, &v_t, &v_x);
    let mut c0s = s.c0_increments.clone();
    let mut c1s = s.c1_increments.clone();
    c0s.push(c0);
    c1s.push(c1);
    let inner = it.iterations + it.inner_iterations;
    Ok((
        QuasilinearState { k: s.k + 1, v, u: it.u, v_t, v_x, c0_increments: c0s, c1_increments: c1s, frozen: Some(coeffs) },
        inner,
    ))
}

/// Linear tolerance fine enough that C¹ increments (which divide by the
/// mesh widths) resolve the outer tolerance.
fn linear_options(grid: &Grid, opts: &QuasilinearOptions) -> SolverOptions {
    let h = grid.dx().min(grid.dt());
    let mut lin = opts.linear;
    lin.tol = lin.tol.min(1e-3 * opts.tol * h).max(1e-14);
    lin
}

fn plan_at_zero(
    p: &QuasilinearProblem<'_>,
    opts: &QuasilinearOptions,
) -> Result<(Plan, ConditionReport, HyperbolicityReport), QuasilinearError> {
    let zero = QuasilinearState::zero(p.grid, p.system.n);
    let coeffs = freeze(p, &zero, opts)?;
    let hyp = validate_hyperbolicity(&coeffs, &p.grid, opts.lambda0, None)?;
    let linear = linear_options(&p.grid, opts);
    let conditions = condition_report(&coeffs, &p.boundary, &p.grid, &linear.condition_options())?;
    let (route, reversed) = match select_route(&coeffs, &p.boundary, &p.grid, &conditions, &linear) {
        Ok(r) => r,
        Err(SolveError::ConditionsNotSatisfied { .. }) => return Err(QuasilinearError::ConditionsAtZero),
        Err(e) => return Err(e.into()),
    };
    Ok((Plan { route, reversed, linear }, conditions, hyp))
}

/// Median of consecutive increment ratios where both increments exceed `floor`.
pub fn contraction_ratio(increments: &[f64], floor: f64) -> Option<f64> {
    let mut r: Vec<f64> = increments.windows(2).filter(|w| w[0] > floor && w[1] > floor).map(|w| w[1] / w[0]).collect();
    if r.is_empty() {
        return None;
    }
    r.sort_by(|a, b| a.total_cmp(b));
    let n = r.len();
    Some(if n % 2 == 1 { r[n / 2] } else { 0.5 * (r[n / 2 - 1] + r[n / 2]) })
}

/// Solves the quasilinear problem by the frozen-coefficient outer iteration.
pub fn solve_quasilinear(p: &QuasilinearProblem<'_>, opts: &QuasilinearOptions) -> Result<QuasilinearReport, QuasilinearError> {
    solve_quasilinear_with(p, opts, &mut |_| {})
}

/// [`solve_quasilinear`] with a callback after every outer step.
pub fn solve_quasilinear_with(
    p: &QuasilinearProblem<'_>,
    opts: &QuasilinearOptions,
    progress: &mut dyn FnMut(&OuterStep),
) -> Result<QuasilinearReport, QuasilinearError> {
    check_problem(p)?;
    p.boundary.validate(&p.grid).map_err(SolveError::from)?;
    let (plan, conditions_at_zero, hyperbolicity_at_zero) = plan_at_zero(p, opts)?;
    let data_norm = Source::Exprs(p.f.clone()).sup_on(&p.grid) + p.h.sup_on(&p.grid);
    let gate = opts.smallness * hyperbolicity_at_zero.min_speed_margin.min(hyperbolicity_at_zero.min_gap);
    let mut warnings = Vec::new();
    if data_norm > gate {
        if !opts.skip_smallness_gate {
            return Err(QuasilinearError::DataTooLarge { data: data_norm, gate });
        }
        warnings.push(format!("data size {data_norm:.3e} exceeds the smallness gate {gate:.3e}"));
    }
    if plan.route == Route::Unchecked {
        warnings.push(String::from("no dissipativity condition holds at V = 0; Picard iteration forced"));
    }

    let mut state = QuasilinearState::zero(p.grid, p.system.n);
    let mut steps = Vec::new();
    let mut growing = 0;
    let mut converged = false;
    while state.k < opts.max_outer {
        let (next, inner) = step(p, &state, &plan, opts)?;
        let c0 = *next.c0_increments.last().unwrap_or(&0.0);
        let c1 = *next.c1_increments.last().unwrap_or(&0.0);
        let rec = OuterStep { k: next.k, c0_increment: c0, c1_increment: c1, inner_iterations: inner, v_sup: next.v.sup_norm() };
        progress(&rec);
        steps.push(rec);
        if let [.., prev, last] = next.c1_increments.as_slice() {
            growing = if last > prev { growing + 1 } else { 0 };
        }
        state = next;
        if !(c1.is_finite()) {
            return Err(QuasilinearError::OuterDivergence { k: state.k, increment: c1, patience: growing });
        }
        if c1 < opts.tol {
            converged = true;
            break;
        }
        if growing >= opts.divergence_patience {
            return Err(QuasilinearError::OuterDivergence { k: state.k, increment: c1, patience: growing });
        }
    }
    if !converged {
        warnings.push(format!("outer iteration stopped at max_outer = {} without reaching tol", opts.max_outer));
    }
    let floor = 1e3 * plan.linear.tol;
    let outer_ratio = contraction_ratio(&state.c0_increments, floor);
    let periodicity_defect = match opts.period {
        Some(t) => Some(verify_periodicity(&state.v, t)?),
        None => None,
    };
    Ok(QuasilinearReport {
        v: state.v,
        u: state.u,
        steps,
        converged,
        outer_ratio,
        route: plan.route,
        conditions_at_zero,
        hyperbolicity_at_zero,
        data_norm,
        gate,
        periodicity_defect,
        warnings,
    })
}

/// Runs one more outer step from a converged `V` and returns the C⁰ change.
pub fn fixed_point_defect(p: &QuasilinearProblem<'_>, v: &GridField, opts: &QuasilinearOptions) -> Result<f64, QuasilinearError> {
    check_problem(p)?;
    let (plan, _, _) = plan_at_zero(p, opts)?;
    let mut s = QuasilinearState::zero(p.grid, p.system.n);
    s.v = v.clone();
    s.v_t = v.dt_central();
    s.v_x = v.dx_central();
    let (next, _) = step(p, &s, &plan, opts)?;
    Ok(next.v.max_abs_diff(v))
}

/// Sup norm of the finite-difference residual `V_t + A V_x + B V - f`
/// over interior nodes of the diagnostic region.
pub fn pde_residual(sys: &QuasilinearSystem, f: &[Compiled], v: &GridField) -> f64 {
    let n = sys.n;
    let g = v.grid;
    let vt = v.dt_central();
    let vx = v.dx_central();
    let mut vv = vec![0.0; n];
    let mut worst = 0.0f64;
    for i in 1..g.nx {
        let x = g.x(i);
        for k in g.diagnostic_nodes() {
            if !g.is_periodic() && (k == 0 || k + 1 >= g.ntn()) {
                continue;
            }
            let t = g.t(k);
            for (l, val) in vv.iter_mut().enumerate() {
                *val = v.get(l, i, k);
            }
            for j in 0..n {
                let mut r = vt.get(j, i, k) - f[j].at(x, t);
                for l in 0..n {
                    r += sys.amat[j][l].at_v(x, t, &vv) * vx.get(l, i, k) + sys.bmat[j][l].at_v(x, t, &vv) * vv[l];
                }
                worst = worst.max(r.abs());
            }
        }
    }
    worst
}

/// Sup norm of `U_j(x_j, t) - (R Z)_j(t) - h_j(t)` on the time nodes,
/// with `U = Q^{-1}(V) V` taken from the last frozen coefficients.
pub fn boundary_residual(p: &QuasilinearProblem<'_>, u: &GridField) -> Result<f64, QuasilinearError> {
    let n = p.system.n;
    let m = p.system.m;
    let g = p.grid;
    let z: Vec<Vec<f64>> = (0..n).map(|j| u.column(j, if j < m { g.nx } else { 0 }).to_vec()).collect();
    let plan = crate::boundary::BoundaryPlan::new(&p.boundary, &g);
    let rz = plan.apply(&z);
    let mut worst = 0.0f64;
    for j in 0..n {
        let col = if j < m { 0 } else { g.nx };
        for k in g.diagnostic_nodes() {
            let r = u.get(j, col, k) - rz[j][k] - p.h.at(&g, j, g.t(k));
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Perturbation experiment
// ---------------------------------------------------------------------------

/// Speeds shifted by `eps * sin(t)`.
pub struct PerturbedSpeeds<'a> {
    pub base: &'a dyn Coefficients,
    pub eps: f64,
}

impl Coefficients for PerturbedSpeeds<'_> {
    fn n(&self) -> usize {
        self.base.n()
    }
    fn m(&self) -> usize {
        self.base.m()
    }
    fn a(&self, j: usize, x: f64, t: f64) -> f64 {
        self.base.a(j, x, t) + self.eps * libm::sin(t)
    }
    fn a_t(&self, j: usize, x: f64, t: f64) -> f64 {
        self.base.a_t(j, x, t) + self.eps * libm::cos(t)
    }
    fn b(&self, j: usize, k: usize, x: f64, t: f64) -> f64 {
        self.base.b(j, k, x, t)
    }
    fn b_t(&self, j: usize, k: usize, x: f64, t: f64) -> f64 {
        self.base.b_t(j, k, x, t)
    }
    fn has_coupling(&self) -> bool {
        self.base.has_coupling()
    }
}

/// Problem whose speeds are perturbed.
pub enum PerturbationTarget<'a> {
    Linear(&'a LinearProblem<'a>),
    Quasilinear(&'a QuasilinearProblem<'a>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub eps: f64,
    /// Sup change of the solution at `eps`.
    pub delta: f64,
    /// Sup change at `eps / 10`.
    pub delta_tenth: f64,
    /// `delta / delta_tenth`; absent when the smaller change vanishes.
    pub ratio: Option<f64>,
}

fn solve_perturbed(target: &PerturbationTarget<'_>, eps: f64, opts: &QuasilinearOptions) -> Result<GridField, QuasilinearError> {
    match target {
        PerturbationTarget::Linear(p) => {
            let sys = PerturbedSpeeds { base: p.system, eps };
            validate_hyperbolicity(&sys, &p.grid, opts.lambda0, None)?;
            let q = LinearProblem {
                system: &sys,
                boundary: p.boundary.clone(),
                g: p.g.clone(),
                h: p.h.clone(),
                grid: p.grid,
                q: p.q.clone(),
            };
            Ok(solve_linear(&q, &opts.linear)?.u)
        }
        PerturbationTarget::Quasilinear(p) => {
            let sys = if eps == 0.0 { p.system.clone() } else { p.system.perturbed(eps) };
            let q =
                QuasilinearProblem { system: &sys, boundary: p.boundary.clone(), f: p.f.clone(), h: p.h.clone(), grid: p.grid };
            Ok(solve_quasilinear(&q, opts)?.v)
        }
    }
}

/// Solution change under speed perturbations `eps sin t` and `(eps/10) sin t`.
pub fn perturbation_experiment(
    target: &PerturbationTarget<'_>,
    eps: f64,
    opts: &QuasilinearOptions,
) -> Result<PerturbationReport, QuasilinearError> {
    let base = solve_perturbed(target, 0.0, opts)?;
    let delta = solve_perturbed(target, eps, opts)?.max_abs_diff(&base);
    let delta_tenth = solve_perturbed(target, 0.1 * eps, opts)?.max_abs_diff(&base);
    let ratio = if delta_tenth > 0.0 { Some(delta / delta_tenth) } else { None };
    Ok(PerturbationReport { eps, delta, delta_tenth, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Compiled;
    use std::println;

    fn scalar(a: &str) -> QuasilinearSystem {
        let c = |s: &str| Compiled::parse(s).unwrap();
        QuasilinearSystem::new(1, vec![vec![c(a)]], vec![c(a)], vec![vec![c("1")]], vec![vec![c("1")]]).unwrap()
    }

    fn problem<'a>(sys: &'a QuasilinearSystem, eps: f64, grid: Grid) -> QuasilinearProblem<'a> {
        QuasilinearProblem {
            system: sys,
            boundary: BoundaryOperatorSpec::reflection(&[&["0.5"]]).unwrap(),
            f: vec![Compiled::parse(&format!("{eps} * sin(t)")).unwrap()],
            h: BoundarySource::zero(1),
            grid,
        }
    }

    fn grid() -> Grid {
        Grid::periodic(32, 64, 2.0 * core::f64::consts::PI, 0.0).unwrap()
    }

    #[test]
    fn zero_data_gives_zero_after_one_step() {
        let sys = scalar("1 + V1");
        let p = problem(&sys, 0.0, grid());
        let rep = solve_quasilinear(&p, &QuasilinearOptions::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.steps.len(), 1);
        assert!(rep.v.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn small_data_contracts() {
        let sys = scalar("1 + V1");
        let mut ratios = Vec::new();
        for eps in [1e-2, 5e-3, 2.5e-3] {
            let p = problem(&sys, eps, grid());
            let rep = solve_quasilinear(&p, &QuasilinearOptions::default()).unwrap();
            assert!(rep.converged, "{:?}", rep.steps);
            println!("eps {eps}: {:?} ratio {:?}", rep.steps.iter().map(|s| s.c0_increment).collect::<Vec<_>>(), rep.outer_ratio);
            ratios.push(rep.outer_ratio.unwrap());
            let extra = fixed_point_defect(&p, &rep.v, &QuasilinearOptions::default()).unwrap();
            assert!(extra <= 10.0 * 1e-8, "{extra}");
        }
        for w in ratios.windows(2) {
            let rr = w[0] / w[1];
            assert!((1.6..=2.4).contains(&rr), "{ratios:?}");
        }
    }

    #[test]
    fn large_data_is_rejected() {
        let sys = scalar("1 + V1");
        let p = problem(&sys, 10.0, grid());
        assert!(matches!(solve_quasilinear(&p, &QuasilinearOptions::default()), Err(QuasilinearError::DataTooLarge { .. })));
        let opts = QuasilinearOptions { skip_smallness_gate: true, ..Default::default() };
        let err = solve_quasilinear(&p, &opts).unwrap_err();
        assert!(matches!(err, QuasilinearError::StateLeftBox { .. } | QuasilinearError::OuterDivergence { .. }), "{err:?}");
    }

    #[test]
    fn zero_perturbation_changes_nothing() {
        let sys = scalar("1 + V1");
        let p = problem(&sys, 1e-2, grid());
        let rep = perturbation_experiment(&PerturbationTarget::Quasilinear(&p), 0.0, &QuasilinearOptions::default()).unwrap();
        assert_eq!(rep.delta, 0.0);
    }
}
