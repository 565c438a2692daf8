//! Loss-of-smoothness counterexample.
//!
//! ```text
//! ∂_t u_1 + 2/(4π-1) ∂_x u_1 = 1,   ∂_t u_2 - (2 + sin t) ∂_x u_2 = 0,
//! u_1(0,t) = r_1(t) u_2(0,t),       u_2(1,t) = r_2 u_1(1,t),
//! ```
//!
//! 2π-periodic in `t`, with `r_1(t) = α + β sin(t - t₀)` and `t₀ = 1/4`.
//! At `t₀` the backward characteristic of `u_2` returns to the same phase, so
//! `u_2(0, t₀) = r_2 (4π-1) / (2 (1 - r_2 r_1(t₀)))` and the derivative
//! there is amplified by `κ = ∂_t ω_2(1, 0, t₀) = (2 + sin t₀)/(2 - sin t₀)`.
//! When `r_2 r_1(t₀) κ = 1` the periodic solution is continuous but not
//! differentiable at `t₀`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::BoundaryOperatorSpec;
use crate::characteristics::{trace, CharError};
use crate::conditions::{condition_report, ConditionReport};
use crate::expr::{Compiled, ParseError};
use crate::fields::{series_cubic, DiagonalSystem, FieldError, Grid};
use crate::linear_solver::{solve_derivative_field, solve_linear, LinearProblem, SolveError, SolverOptions};
use crate::operators::{BoundarySource, Source};

/// Phase at which the return map of the second family is stationary.
pub const T0: f64 = 0.25;
/// Control point away from the stationary phases `t₀ + πk`.
pub const CONTROL: f64 = T0 + 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("invalid counterexample parameters: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Characteristic(#[from] CharError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Condition(#[from] crate::conditions::ConditionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RegularityMode {
    /// `r_2 r_1(t₀) κ = 1`.
    Critical,
    /// `r_2 r_1(t₀) κ = s` with `0 < s < 1`.
    Subcritical { s: f64 },
}

impl RegularityMode {
    pub fn product(self) -> f64 {
        match self {
            RegularityMode::Critical => 1.0,
            RegularityMode::Subcritical { s } => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleConfig {
    pub r2: f64,
    pub beta: f64,
    pub mode: RegularityMode,
    pub nx: usize,
    /// Time resolutions, coarse to fine.
    pub nt_list: Vec<usize>,
    /// Divided-difference steps, coarse to fine.
    pub steps: Vec<f64>,
    pub solver: SolverOptions,
    /// Also solve the differentiated system on the finest grid.
    #[serde(default)]
    pub derivative: bool,
}

impl Default for CounterexampleConfig {
    fn default() -> Self {
        CounterexampleConfig {
            r2: 0.9,
            beta: 0.05,
            mode: RegularityMode::Critical,
            nx: 256,
            nt_list: vec![4096],
            steps: vec![1e-1, 1e-2, 1e-3],
            solver: SolverOptions::default(),
            derivative: false,
        }
    }
}

/// `p(t) = -2t + cos t`; `ω_2(ξ, x, t) = p^{-1}(p(t) + ξ - x)`.
pub fn p(t: f64) -> f64 {
    -2.0 * t + libm::cos(t)
}

pub fn kappa_closed_form() -> f64 {
    let s = libm::sin(T0);
    (2.0 + s) / (2.0 - s)
}

/// Speed of the first family.
pub fn speed1() -> f64 {
    2.0 / (4.0 * PI - 1.0)
}

pub fn system() -> DiagonalSystem {
    DiagonalSystem::parse(1, &["2/(4*pi-1)", "-(2+sin(t))"], &[&["0", "0"], &["0", "0"]]).expect("fixed coefficients parse")
}

/// Exit phase `ω_2(1, 0, t)` and `∂_t ω_2(1, 0, t)` by tracing the second family.
pub fn return_map(t: f64, nx: usize, oversample: usize) -> Result<(f64, f64), CharError> {
    let ch = trace(&system(), 1, 0.0, t, nx, oversample)?;
    Ok((ch.end_omega(), ch.end_dt_omega()))
}

/// Validated parameters of the boundary coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleParams {
    pub r2: f64,
    pub alpha: f64,
    pub beta: f64,
    /// `∂_t ω_2(1, 0, t₀)` from the traced characteristic.
    pub kappa: f64,
    pub product: f64,
}

impl CounterexampleParams {
    pub fn new(r2: f64, beta: f64, mode: RegularityMode, kappa: f64) -> Result<CounterexampleParams, ScenarioError> {
        if !(r2 > 0.0 && r2 < 1.0) {
            return Err(ScenarioError::InvalidConfig(format!("r2 = {r2} must lie in (0, 1)")));
        }
        let product = mode.product();
        if !(product > 0.0 && product <= 1.0) {
            return Err(ScenarioError::InvalidConfig(format!("product s = {product} must lie in (0, 1]")));
        }
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(ScenarioError::InvalidConfig(format!("amplification {kappa} is not positive")));
        }
        let alpha = product / (r2 * kappa);
        if !(alpha - beta.abs() > 0.0 && alpha + beta.abs() < 1.0) {
            return Err(ScenarioError::InvalidConfig(format!(
                "r1 = {alpha:.6} + {beta} sin(t - 1/4) leaves (0, 1); need alpha + |beta| < 1"
            )));
        }
        if matches!(mode, RegularityMode::Critical) && beta == 0.0 {
            return Err(ScenarioError::InvalidConfig("critical mode needs beta != 0".into()));
        }
        Ok(CounterexampleParams { r2, alpha, beta, kappa, product })
    }

    pub fn r1(&self, t: f64) -> f64 {
        self.alpha + self.beta * libm::sin(t - T0)
    }

    /// `u_2(0, t₀)` from the fixed-phase balance.
    pub fn u2_closed_form(&self) -> f64 {
        self.r2 * (4.0 * PI - 1.0) / (2.0 * (1.0 - self.r2 * self.r1(T0)))
    }

    pub fn boundary(&self) -> BoundaryOperatorSpec {
        let r1 = format!("{:?} + {:?} * sin(t - 0.25)", self.alpha, self.beta);
        let r2 = format!("{:?}", self.r2);
        BoundaryOperatorSpec::reflection(&[&["0", &r1], &[&r2, "0"]]).expect("generated coefficients parse")
    }

    pub fn grid(nx: usize, nt: usize) -> Result<Grid, FieldError> {
        Grid::periodic(nx, nt, 2.0 * PI, T0)
    }

    pub fn problem<'a>(&self, sys: &'a DiagonalSystem, grid: Grid) -> LinearProblem<'a> {
        LinearProblem {
            system: sys,
            boundary: self.boundary(),
            g: Source::Exprs(vec![Compiled::constant(1.0), Compiled::constant(0.0)]),
            h: BoundarySource::zero(2),
            grid,
            q: None,
        }
    }
}

/// Divided differences at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DividedDifferences {
    pub t: f64,
    pub steps: Vec<f64>,
    /// Central differences `(u(t+h) - u(t-h)) / 2h`, one per step.
    pub values: Vec<f64>,
    /// `|D(h_last) - D(h_prev)| / |D(h_prev)|`.
    pub relative_change: f64,
}

/// Central divided differences of a periodic trace by cubic interpolation.
pub fn divided_differences(grid: &Grid, series: &[f64], t: f64, steps: &[f64]) -> DividedDifferences {
    let values: Vec<f64> =
        steps.iter().map(|h| (series_cubic(grid, series, t + h) - series_cubic(grid, series, t - h)) / (2.0 * h)).collect();
    let relative_change = match values.as_slice() {
        [.., a, b] => (b - a).abs() / a.abs(),
        _ => 0.0,
    };
    DividedDifferences { t, steps: steps.to_vec(), values, relative_change }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub nx: usize,
    pub nt: usize,
    pub u2_t0: f64,
    pub u2_error: f64,
    pub iterations: usize,
    pub at_t0: DividedDifferences,
    pub at_control: DividedDifferences,
}

/// Outcome of the derivative solve on the finest grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeSummary {
    pub converged: bool,
    pub error: Option<String>,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub regularity_uncertified: bool,
    /// `w_2(0, t₀)` and the central difference of `u_2(0, ·)` there.
    pub w2_t0: f64,
    pub fd_t0: f64,
    pub w2_control: f64,
    pub fd_control: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub mode: RegularityMode,
    pub params: CounterexampleParams,
    pub kappa_closed_form: f64,
    /// `ω_2(1, 0, t₀)`.
    pub exit_phase: f64,
    pub u2_closed_form: f64,
    pub runs: Vec<GridRun>,
    /// `‖G_1‖` estimate on the finest grid.
    pub g1_estimate: f64,
    /// Lower bound `r_2 κ` of `‖G_1‖` from a test function peaked at `ω_2(1,0,t₀)`.
    pub g1_lower_bound: f64,
    pub b1: bool,
    pub c1_regular: bool,
    pub conditions: ConditionReport,
    pub derivative: Option<DerivativeSummary>,
    /// `u_2(0, t)` on the finest grid's time nodes.
    #[serde(skip)]
    pub trace: Vec<f64>,
    #[serde(skip)]
    pub grid: Option<Grid>,
}

/// Amplification and exit phase traced at resolution `nx`.
pub fn amplification(nx: usize, oversample: usize) -> Result<(f64, f64), ScenarioError> {
    let (exit, kappa) = return_map(T0, nx, oversample)?;
    Ok((kappa, exit))
}

/// Builds, solves and diagnoses the counterexample on every grid of `cfg.nt_list`.
pub fn counterexample_scenario(cfg: &CounterexampleConfig) -> Result<RegularityReport, ScenarioError> {
    if cfg.nt_list.is_empty() || cfg.steps.len() < 2 {
        return Err(ScenarioError::InvalidConfig("need at least one grid and two steps".into()));
    }
    let (kappa, exit_phase) = amplification(cfg.nx, cfg.solver.oversample)?;
    let params = CounterexampleParams::new(cfg.r2, cfg.beta, cfg.mode, kappa)?;
    let sys = system();
    let mut runs = Vec::new();
    let mut last = None;
    let mut derivative = None;
    let mut finest = (Vec::new(), None);
    for (idx, &nt) in cfg.nt_list.iter().enumerate() {
        let grid = CounterexampleParams::grid(cfg.nx, nt)?;
        let prob = params.problem(&sys, grid);
        let rep = solve_linear(&prob, &cfg.solver)?;
        let trace = rep.u.column(1, 0).to_vec();
        if idx + 1 == cfg.nt_list.len() {
            if cfg.derivative {
                derivative = Some(derivative_summary(&prob, &rep.u, &trace, &cfg.solver));
            }
            finest = (trace.clone(), Some(grid));
        }
        let u2 = trace[0];
        runs.push(GridRun {
            nx: cfg.nx,
            nt,
            u2_t0: u2,
            u2_error: (u2 - params.u2_closed_form()).abs(),
            iterations: rep.iterations,
            at_t0: divided_differences(&grid, &trace, T0, &cfg.steps),
            at_control: divided_differences(&grid, &trace, CONTROL, &cfg.steps),
        });
        last = Some(rep.conditions);
    }
    let conditions = last.expect("at least one grid");
    let g1_estimate = conditions.norm_checks.map_or(f64::NAN, |c| c[0].estimate);
    Ok(RegularityReport {
        mode: cfg.mode,
        params,
        kappa_closed_form: kappa_closed_form(),
        exit_phase,
        u2_closed_form: params.u2_closed_form(),
        runs,
        g1_estimate,
        g1_lower_bound: params.r2 * kappa,
        b1: conditions.b1,
        c1_regular: conditions.c1_regular,
        conditions,
        derivative,
        trace: finest.0,
        grid: finest.1,
    })
}

fn derivative_summary(
    prob: &LinearProblem<'_>,
    u: &crate::fields::GridField,
    trace: &[f64],
    opts: &SolverOptions,
) -> DerivativeSummary {
    let grid = prob.grid;
    let h = grid.dt();
    let fd = |t: f64| (series_cubic(&grid, trace, t + h) - series_cubic(&grid, trace, t - h)) / (2.0 * h);
    match solve_derivative_field(prob, u, opts) {
        Ok(d) => {
            let w2 = d.w.column(1, 0);
            DerivativeSummary {
                converged: true,
                error: None,
                iterations: d.iterations,
                inner_iterations: d.inner_iterations,
                regularity_uncertified: d.regularity_uncertified,
                w2_t0: w2[0],
                fd_t0: fd(T0),
                w2_control: series_cubic(&grid, w2, CONTROL),
                fd_control: fd(CONTROL),
            }
        }
        Err(e) => DerivativeSummary {
            converged: false,
            error: Some(format!("{e}")),
            iterations: 0,
            inner_iterations: 0,
            regularity_uncertified: true,
            w2_t0: f64::NAN,
            fd_t0: fd(T0),
            w2_control: f64::NAN,
            fd_control: fd(CONTROL),
        },
    }
}

/// Condition report of the counterexample without solving it.
pub fn counterexample_conditions(
    cfg: &CounterexampleConfig,
    nt: usize,
) -> Result<(CounterexampleParams, ConditionReport), ScenarioError> {
    let (kappa, _) = amplification(cfg.nx, cfg.solver.oversample)?;
    let params = CounterexampleParams::new(cfg.r2, cfg.beta, cfg.mode, kappa)?;
    let grid = CounterexampleParams::grid(cfg.nx, nt)?;
    let rep = condition_report(&system(), &params.boundary(), &grid, &cfg.solver.condition_options())?;
    Ok((params, rep))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amplification_matches_closed_form() {
        let (k, exit) = amplification(256, 4).unwrap();
        assert!((k - kappa_closed_form()).abs() < 1e-6);
        assert!((exit + T0).abs() < 1e-8);
    }

    #[test]
    fn parameter_box() {
        let k = kappa_closed_form();
        let p = CounterexampleParams::new(0.9, 0.05, RegularityMode::Critical, k).unwrap();
        assert!((p.r2 * p.r1(T0) * k - 1.0).abs() < 1e-12);
        assert!(CounterexampleParams::new(0.9, 0.5, RegularityMode::Critical, k).is_err());
        assert!(CounterexampleParams::new(1.2, 0.05, RegularityMode::Critical, k).is_err());
        assert!(CounterexampleParams::new(0.9, 0.0, RegularityMode::Critical, k).is_err());
    }

    #[test]
    fn coarse_trace_value() {
        let cfg = CounterexampleConfig {
            mode: RegularityMode::Subcritical { s: 0.5 },
            nx: 64,
            nt_list: vec![512],
            ..Default::default()
        };
        let rep = counterexample_scenario(&cfg).unwrap();
        assert!(rep.runs[0].u2_error < 1e-2, "{:?}", rep.runs[0]);
        assert!(rep.b1);
    }
}
