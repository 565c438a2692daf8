//! Subcommand dispatch, verdicts and exit codes.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::PathBuf;

use charstrip_core::characteristics::{trace, CharError};
use charstrip_core::conditions::{condition_report, ConditionError, ConditionReport};
use charstrip_core::fields::{
    diagonalize_at_state, validate_hyperbolicity, Coefficients, FieldError, Grid, GridCoefficients, GridField,
    HyperbolicityReport, TimeTopology,
};
use charstrip_core::linear_solver::{solve_derivative_field, solve_linear, verify_periodicity, LinearProblem, Route, SolveError};
use charstrip_core::operators::{BoundarySource, Source};
use charstrip_core::quasilinear_solver::{
    boundary_residual, pde_residual, solve_quasilinear_with, OuterStep, QuasilinearError, QuasilinearProblem,
};
use charstrip_core::scenarios::{self, counterexample_scenario, RegularityMode, RegularityReport, ScenarioError, CONTROL, T0};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, Mode, Overrides, RunConfig, SystemConfig};
use crate::io::{self, IoError};

/// Version of every JSON document written by the CLI.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "CHARSTRIP_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "charstrip",
    version,
    about = "Characteristic-based solver for hyperbolic boundary-value problems on [0, 1] x R"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate the dissipativity and norm conditions.
    Check(RunArgs),
    /// Solve a linear problem.
    SolveLinear(RunArgs),
    /// Solve a quasilinear problem by outer iteration.
    SolveQuasilinear(RunArgs),
    /// Run the loss-of-smoothness counterexample.
    Counterexample(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Spatial cells; overrides the config.
    #[arg(long)]
    pub nx: Option<usize>,
    /// Time cells; overrides the config.
    #[arg(long)]
    pub nt: Option<usize>,
    /// Trace family J (1-based) backwards from (X, T) and write `characteristic.csv`.
    #[arg(long, value_name = "J,X,T")]
    pub dump_characteristic: Option<String>,
    /// Suppress progress lines on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Characteristic(#[from] CharError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error(transparent)]
    Linear(#[from] SolveError),
    #[error(transparent)]
    Quasilinear(#[from] QuasilinearError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// Exit status of a run that produced verdicts.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VERDICT_FAILED: i32 = 1;

fn linear_code(e: &SolveError) -> i32 {
    match e {
        SolveError::ConditionsNotSatisfied { .. } => 6,
        SolveError::NonContraction { .. } => 7,
        SolveError::ToleranceNotReached { .. } => 8,
        SolveError::WindowTooShort { .. } => 9,
        SolveError::Boundary(_) | SolveError::Shape(_) => 5,
        SolveError::Operator(_) | SolveError::Condition(_) => 11,
    }
}

impl CliError {
    /// Process exit code; see the README for the table.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Field(_) => 5,
            CliError::Characteristic(_) | CliError::Condition(_) => 11,
            CliError::Linear(e) => linear_code(e),
            CliError::Quasilinear(e) => match e {
                QuasilinearError::OuterDivergence { .. }
                | QuasilinearError::StateLeftBox { .. }
                | QuasilinearError::DataTooLarge { .. } => 10,
                QuasilinearError::ConditionsAtZero => 6,
                QuasilinearError::Field(_) | QuasilinearError::Shape(_) => 5,
                QuasilinearError::Linear(e) => linear_code(e),
                QuasilinearError::Condition(_) => 11,
            },
            CliError::Scenario(e) => match e {
                ScenarioError::InvalidConfig(_) => 3,
                ScenarioError::Field(_) | ScenarioError::Parse(_) => 5,
                ScenarioError::Solve(e) => linear_code(e),
                ScenarioError::Characteristic(_) | ScenarioError::Condition(_) => 11,
            },
        }
    }
}

/// A named pass/fail outcome. The run exits 0 iff all requested verdicts
/// pass; the others are informational.
#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub key: String,
    pub name: String,
    pub pass: bool,
    pub requested: bool,
    pub detail: String,
}

impl Verdict {
    fn new(name: &str, pass: bool, detail: String) -> Verdict {
        Verdict { key: name.replace(' ', "_"), name: name.into(), pass, requested: true, detail }
    }

    fn keyed(key: &str, name: &str, pass: bool, detail: String) -> Verdict {
        Verdict { key: key.into(), ..Verdict::new(name, pass, detail) }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Probe {
    pub x: f64,
    pub t: f64,
    pub values: Vec<f64>,
}

fn probes(cfg: &RunConfig, u: &GridField) -> Vec<Probe> {
    cfg.output
        .probes
        .iter()
        .map(|&[x, t]| Probe { x, t, values: (0..u.n).map(|c| u.interp(c, x.clamp(0.0, 1.0), t)).collect() })
        .collect()
}

/// Parses arguments, runs the subcommand and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match run(&cli.command) {
        Ok(verdicts) => {
            for v in &verdicts {
                let status = match (v.pass, v.requested) {
                    (true, true) => "PASS",
                    (false, true) => "FAIL",
                    (true, false) => "pass (info)",
                    (false, false) => "fail (info)",
                };
                println!("{:<28} {:<11}  {}", v.name, status, v.detail);
            }
            if verdicts.iter().all(|v| v.pass || !v.requested) {
                EXIT_OK
            } else {
                EXIT_VERDICT_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    #[cfg(feature = "parallel")]
    {
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    if threads > 1 {
        eprintln!("note: built without the `parallel` feature; {THREADS_ENV}={threads} is ignored");
    }
    Ok(())
}

/// Runs one subcommand and returns its verdicts.
pub fn run(cmd: &Command) -> Result<Vec<Verdict>, CliError> {
    let (args, kind) = match cmd {
        Command::Check(a) => (a, Kind::Check),
        Command::SolveLinear(a) => (a, Kind::Linear),
        Command::SolveQuasilinear(a) => (a, Kind::Quasilinear),
        Command::Counterexample(a) => (a, Kind::Counterexample),
    };
    let ov = Overrides { nx: args.nx, nt: args.nt, out: args.out.clone() };
    let cfg = RunConfig::load(&args.config, &ov)?;
    let dump = args.dump_characteristic.as_deref().map(parse_dump).transpose()?;
    match kind {
        Kind::Check => check(&cfg, dump),
        Kind::Linear => solve_linear_cmd(&cfg, dump),
        Kind::Quasilinear => solve_quasilinear_cmd(&cfg, dump, args.quiet),
        Kind::Counterexample => counterexample_cmd(&cfg, dump, args.quiet),
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Check,
    Linear,
    Quasilinear,
    Counterexample,
}

#[derive(Debug, Clone, Copy)]
struct Dump {
    family: usize,
    x: f64,
    t: f64,
}

fn parse_dump(s: &str) -> Result<Dump, CliError> {
    let bad = || CliError::Usage(format!("--dump-characteristic expects J,X,T with J >= 1 and 0 <= X <= 1, got `{s}`"));
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [j, x, t] = parts.as_slice() else { return Err(bad()) };
    let family: usize = j.parse().map_err(|_| bad())?;
    let x: f64 = x.parse().map_err(|_| bad())?;
    let t: f64 = t.parse().map_err(|_| bad())?;
    if family == 0 || !(0.0..=1.0).contains(&x) || !t.is_finite() {
        return Err(bad());
    }
    Ok(Dump { family, x, t })
}

fn write_dump(cfg: &RunConfig, sys: &dyn Coefficients, nx: usize, d: Dump) -> Result<(), CliError> {
    if d.family > sys.n() {
        return Err(CliError::Usage(format!("family {} exceeds n = {}", d.family, sys.n())));
    }
    let ch = trace(sys, d.family - 1, d.x, d.t, nx, cfg.solver.oversample)?;
    let csv = io::columns_csv(
        &["xi", "omega", "c0", "c1", "c2", "d", "dt_omega"],
        &[&ch.xi, &ch.omega, &ch.c[0], &ch.c[1], &ch.c[2], &ch.d, &ch.dt_omega],
    );
    io::write_atomic(&cfg.output.dir.join("characteristic.csv"), csv.as_bytes())?;
    Ok(())
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output.dir.join(name)
}

/// Coefficients of the quasilinear system frozen at `V = 0`.
fn frozen_at_zero(cfg: &RunConfig, grid: Grid) -> Result<GridCoefficients, CliError> {
    let SystemConfig::Quasilinear { system } = cfg.system()? else { unreachable!("mode checked by the caller") };
    let z = GridField::zeros(grid, system.n);
    Ok(diagonalize_at_state(system, &z, &z, &z, cfg.quasilinear.lambda0, cfg.quasilinear.delta0)?)
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CheckDocument<'a> {
    schema_version: u32,
    command: &'static str,
    mode: String,
    grid: Grid,
    hyperbolicity: HyperbolicityReport,
    conditions: &'a ConditionReport,
    verdicts: &'a [Verdict],
}

#[derive(Serialize)]
struct NormsDocument<'a> {
    schema_version: u32,
    norms: &'a charstrip_core::operators::NormEstimates,
    checks: &'a Option<[charstrip_core::conditions::NormCheck; 2]>,
}

fn write_norms(cfg: &RunConfig, rep: &ConditionReport) -> Result<(), CliError> {
    if let Some(norms) = &rep.norms {
        io::write_json(
            &out(cfg, &cfg.output.norms),
            &NormsDocument { schema_version: SCHEMA_VERSION, norms, checks: &rep.norm_checks },
        )?;
    }
    Ok(())
}

fn yes(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn condition_table(rep: &ConditionReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("conditions sampled on nx = {}, nt = {} (margin {})\n", rep.nx, rep.nt, rep.margin));
    s.push_str("row      gamma       beta      inf b     |R_j|    B1 lhs  B1   B2   B3\n");
    for (j, r) in rep.rows.iter().enumerate() {
        let b3 = r.b3.map_or("-", |b| yes(b.pass));
        s.push_str(&format!(
            "{:>3} {:>10.4} {:>10.4} {:>10.4} {:>9.4} {:>9.4}  {:<4} {:<4} {}\n",
            j + 1,
            r.gamma,
            r.beta,
            r.inf_b,
            r.r_norm,
            r.b1.lhs,
            yes(r.b1.pass),
            yes(r.b2.pass),
            b3
        ));
    }
    s.push_str(&format!("B1 {}  B2 {}  B3 {}\n", yes(rep.b1), yes(rep.b2), rep.b3.map_or("n/a", yes)));
    if let Some(checks) = &rep.norm_checks {
        for c in checks {
            s.push_str(&format!(
                "norm condition i = {}: estimate {:.6} + margin {} < 1: {}\n",
                c.level,
                c.estimate,
                c.margin,
                yes(c.pass)
            ));
        }
    }
    for note in &rep.notes {
        s.push_str(&format!("note: {note}\n"));
    }
    s
}

fn check(cfg: &RunConfig, dump: Option<Dump>) -> Result<Vec<Verdict>, CliError> {
    cfg.require_problem(None)?;
    let grid = cfg.grid()?;
    let boundary = cfg.boundary()?;
    let copts = cfg.solver.condition_options();
    let lambda0 = cfg.quasilinear.lambda0;
    let (hyp, rep) = match cfg.system()? {
        SystemConfig::Linear { system, .. } => {
            if let Some(d) = dump {
                write_dump(cfg, system, grid.nx, d)?;
            }
            (validate_hyperbolicity(system, &grid, lambda0, None)?, condition_report(system, boundary, &grid, &copts)?)
        }
        SystemConfig::Quasilinear { .. } => {
            let coeffs = frozen_at_zero(cfg, grid)?;
            if let Some(d) = dump {
                write_dump(cfg, &coeffs, grid.nx, d)?;
            }
            (validate_hyperbolicity(&coeffs, &grid, lambda0, None)?, condition_report(&coeffs, boundary, &grid, &copts)?)
        }
    };
    print!("{}", condition_table(&rep));
    let verdicts = vec![
        Verdict::new(
            "hyperbolicity",
            hyp.pass,
            format!("speed margin {:.4e}, gap {:.4e}, lambda0 {:.1e}", hyp.min_speed_margin, hyp.min_gap, hyp.lambda0),
        ),
        Verdict::new(
            "solvable",
            rep.bc_solvable,
            format!("B1 {} B2 {} B3 {}", yes(rep.b1), yes(rep.b2), rep.b3.map_or("n/a", yes)),
        ),
    ];
    io::write_json(
        &out(cfg, &cfg.output.json),
        &CheckDocument {
            schema_version: SCHEMA_VERSION,
            command: "check",
            mode: cfg.system()?.mode().to_string(),
            grid,
            hyperbolicity: hyp,
            conditions: &rep,
            verdicts: &verdicts,
        },
    )?;
    write_norms(cfg, &rep)?;
    Ok(verdicts)
}

// ---------------------------------------------------------------------------
// solve-linear
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DerivativeInfo {
    iterations: usize,
    inner_iterations: usize,
    ratio: f64,
    regularity_uncertified: bool,
    w_sup: f64,
}

#[derive(Serialize)]
struct LinearDocument<'a> {
    schema_version: u32,
    command: &'static str,
    grid: Grid,
    route: Route,
    iterations: usize,
    inner_iterations: usize,
    final_residual: Option<f64>,
    ratio: f64,
    apriori: charstrip_core::linear_solver::AprioriCheck,
    u_sup: f64,
    periodicity_defect: Option<f64>,
    derivative: Option<DerivativeInfo>,
    conditions: &'a ConditionReport,
    probes: Vec<Probe>,
    warnings: &'a [String],
    verdicts: &'a [Verdict],
}

/// Default periodicity tolerance relative to the solution size.
const PERIODICITY_RTOL: f64 = 1e-6;

fn periodicity_verdict(defect: f64, scale: f64, tol: f64) -> Verdict {
    let bound = PERIODICITY_RTOL * scale.max(1.0) + tol;
    Verdict::new("periodicity", defect <= bound, format!("defect {defect:.3e}, bound {bound:.3e}"))
}

fn solve_linear_cmd(cfg: &RunConfig, dump: Option<Dump>) -> Result<Vec<Verdict>, CliError> {
    cfg.require_problem(Some(Mode::Linear))?;
    let SystemConfig::Linear { system, q } = cfg.system()? else { unreachable!("mode checked above") };
    let grid = cfg.grid()?;
    if let Some(d) = dump {
        write_dump(cfg, system, grid.nx, d)?;
    }
    let p = LinearProblem {
        system,
        boundary: cfg.boundary()?.clone(),
        g: Source::Exprs(cfg.f()?.to_vec()),
        h: BoundarySource::Exprs(cfg.h()?.to_vec()),
        grid,
        q: q.clone(),
    };
    let rep = solve_linear(&p, &cfg.solver)?;
    let mut warnings = rep.warnings.clone();
    let derivative = if cfg.derivative {
        let d = solve_derivative_field(&p, &rep.u, &cfg.solver)?;
        if d.regularity_uncertified {
            warnings.push("derivative field computed without the i = 1 norm condition".into());
        }
        Some(d)
    } else {
        None
    };
    let mut verdicts = vec![
        Verdict::new(
            "solved",
            true,
            format!("{:?} route, {} iterations, residual ratio {:.4}", rep.route, rep.iterations, rep.ratio),
        ),
        Verdict::new(
            "a-priori bound",
            rep.apriori.holds,
            format!("|u| = {:.4e} <= K (|g| + |h|) with K = {:.4e}", rep.apriori.u_sup, rep.apriori.k),
        ),
    ];
    let periodicity_defect = match (cfg.verify_period, grid.topology) {
        (Some(period), TimeTopology::Window { .. }) => {
            let d = verify_periodicity(&rep.u, period)?;
            verdicts.push(periodicity_verdict(d, rep.u.diagnostic_sup(), cfg.solver.tol));
            Some(d)
        }
        _ => None,
    };
    let state = rep.v.as_ref().unwrap_or(&rep.u);
    let mut fields: Vec<&GridField> = vec![&rep.u];
    let mut prefixes = vec!["u"];
    if let Some(v) = &rep.v {
        fields.push(v);
        prefixes.push("v");
    }
    io::write_atomic(&out(cfg, &cfg.output.csv), io::fields_csv(&fields, &prefixes).as_bytes())?;
    if let Some(d) = &derivative {
        io::write_atomic(&out(cfg, &cfg.output.derivative_csv), io::fields_csv(&[&d.w], &["w"]).as_bytes())?;
    }
    if let Some(name) = &cfg.output.checkpoint {
        io::write_checkpoint(&out(cfg, name), state)?;
    }
    io::write_json(
        &out(cfg, &cfg.output.json),
        &LinearDocument {
            schema_version: SCHEMA_VERSION,
            command: "solve-linear",
            grid,
            route: rep.route,
            iterations: rep.iterations,
            inner_iterations: rep.inner_iterations,
            final_residual: rep.residuals.last().copied(),
            ratio: rep.ratio,
            apriori: rep.apriori,
            u_sup: rep.u.sup_norm(),
            periodicity_defect,
            derivative: derivative.as_ref().map(|d| DerivativeInfo {
                iterations: d.iterations,
                inner_iterations: d.inner_iterations,
                ratio: d.ratio,
                regularity_uncertified: d.regularity_uncertified,
                w_sup: d.w.sup_norm(),
            }),
            conditions: &rep.conditions,
            probes: probes(cfg, state),
            warnings: &warnings,
            verdicts: &verdicts,
        },
    )?;
    write_norms(cfg, &rep.conditions)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(verdicts)
}

// ---------------------------------------------------------------------------
// solve-quasilinear
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct QuasilinearDocument<'a> {
    schema_version: u32,
    command: &'static str,
    grid: Grid,
    converged: bool,
    route: Route,
    steps: &'a [OuterStep],
    outer_ratio: Option<f64>,
    data_norm: f64,
    gate: f64,
    v_sup: f64,
    pde_residual: f64,
    boundary_residual: f64,
    periodicity_defect: Option<f64>,
    hyperbolicity_at_zero: HyperbolicityReport,
    conditions_at_zero: &'a ConditionReport,
    probes: Vec<Probe>,
    warnings: &'a [String],
    verdicts: &'a [Verdict],
}

fn solve_quasilinear_cmd(cfg: &RunConfig, dump: Option<Dump>, quiet: bool) -> Result<Vec<Verdict>, CliError> {
    cfg.require_problem(Some(Mode::Quasilinear))?;
    let SystemConfig::Quasilinear { system } = cfg.system()? else { unreachable!("mode checked above") };
    let grid = cfg.grid()?;
    if let Some(d) = dump {
        write_dump(cfg, &frozen_at_zero(cfg, grid)?, grid.nx, d)?;
    }
    let p = QuasilinearProblem {
        system,
        boundary: cfg.boundary()?.clone(),
        f: cfg.f()?.to_vec(),
        h: BoundarySource::Exprs(cfg.h()?.to_vec()),
        grid,
    };
    let mut progress = |s: &OuterStep| {
        if !quiet {
            let mut err = std::io::stderr().lock();
            let _ = writeln!(
                err,
                "k = {:>3}  C0 inc = {:.3e}  C1 inc = {:.3e}  inner = {:>5}  |V| = {:.3e}",
                s.k, s.c0_increment, s.c1_increment, s.inner_iterations, s.v_sup
            );
        }
    };
    let rep = solve_quasilinear_with(&p, &cfg.quasilinear, &mut progress)?;
    let pde = pde_residual(system, &p.f, &rep.v);
    let bres = boundary_residual(&p, &rep.u)?;
    let mut verdicts = vec![Verdict::new(
        "converged",
        rep.converged,
        format!(
            "{} outer steps, last C1 increment {:.3e}, tol {:.1e}",
            rep.steps.len(),
            rep.steps.last().map_or(0.0, |s| s.c1_increment),
            cfg.quasilinear.tol
        ),
    )];
    if let Some(d) = rep.periodicity_defect {
        verdicts.push(periodicity_verdict(d, rep.v.diagnostic_sup(), cfg.quasilinear.tol));
    }
    io::write_atomic(&out(cfg, &cfg.output.csv), io::fields_csv(&[&rep.v, &rep.u], &["v", "u"]).as_bytes())?;
    if let Some(name) = &cfg.output.checkpoint {
        io::write_checkpoint(&out(cfg, name), &rep.v)?;
    }
    io::write_json(
        &out(cfg, &cfg.output.json),
        &QuasilinearDocument {
            schema_version: SCHEMA_VERSION,
            command: "solve-quasilinear",
            grid,
            converged: rep.converged,
            route: rep.route,
            steps: &rep.steps,
            outer_ratio: rep.outer_ratio,
            data_norm: rep.data_norm,
            gate: rep.gate,
            v_sup: rep.v.sup_norm(),
            pde_residual: pde,
            boundary_residual: bres,
            periodicity_defect: rep.periodicity_defect,
            hyperbolicity_at_zero: rep.hyperbolicity_at_zero,
            conditions_at_zero: &rep.conditions_at_zero,
            probes: probes(cfg, &rep.v),
            warnings: &rep.warnings,
            verdicts: &verdicts,
        },
    )?;
    write_norms(cfg, &rep.conditions_at_zero)?;
    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
    Ok(verdicts)
}

// ---------------------------------------------------------------------------
// counterexample
// ---------------------------------------------------------------------------

/// Tolerance on the traced amplification against its closed form.
const KAPPA_TOL: f64 = 1e-6;
/// Relative tolerance on `u_2(0, t₀)` against its closed form.
const U2_RTOL: f64 = 1e-3;
/// Divided differences are stable below this relative change.
const STABLE_CHANGE: f64 = 0.01;
/// Loss of smoothness is diagnosed above this relative change.
const UNSTABLE_CHANGE: f64 = 0.10;
/// Relative gap between `w_2(0, t₀)` and the divided difference that
/// separates agreement from disagreement.
const DERIVATIVE_RTOL: f64 = 0.10;

#[derive(Serialize)]
struct CounterexampleDocument<'a> {
    schema_version: u32,
    command: &'static str,
    t0: f64,
    control: f64,
    report: &'a RegularityReport,
    verdicts: &'a [Verdict],
}

fn counterexample_verdicts(rep: &RegularityReport) -> Vec<Verdict> {
    let kappa = rep.params.kappa;
    let last = rep.runs.last().expect("at least one grid");
    let rel = last.u2_error / rep.u2_closed_form.abs();
    let critical = matches!(rep.mode, RegularityMode::Critical);
    let c0 = last.at_t0.relative_change;
    let cc = last.at_control.relative_change;
    let mut v = vec![
        Verdict::keyed(
            "amplification",
            "amplification",
            (kappa - rep.kappa_closed_form).abs() <= KAPPA_TOL,
            format!("traced {kappa:.9}, closed form {:.9}", rep.kappa_closed_form),
        ),
        Verdict::keyed(
            "u2",
            "u2(0, t0)",
            rel <= U2_RTOL,
            format!("{:.8} vs closed form {:.8} (rel. error {rel:.2e})", last.u2_t0, rep.u2_closed_form),
        ),
        if critical {
            Verdict::keyed(
                "t0",
                "loss of smoothness at t0",
                c0 > UNSTABLE_CHANGE,
                format!("relative change {c0:.4} (expected > {UNSTABLE_CHANGE})"),
            )
        } else {
            Verdict::keyed(
                "t0",
                "smooth at t0",
                c0 < STABLE_CHANGE,
                format!("relative change {c0:.2e} (expected < {STABLE_CHANGE})"),
            )
        },
        Verdict::keyed(
            "control",
            "smooth at control point",
            cc < STABLE_CHANGE,
            format!("relative change {cc:.2e} (expected < {STABLE_CHANGE})"),
        ),
    ];
    if let Some(d) = &rep.derivative {
        let gap = (d.w2_t0 - d.fd_t0).abs() / d.fd_t0.abs();
        let detail = match &d.error {
            Some(e) => format!("derivative solve failed: {e}"),
            None => format!("w2(0, t0) = {:.6}, divided difference {:.6}, {} iterations", d.w2_t0, d.fd_t0, d.iterations),
        };
        v.push(if critical {
            Verdict::keyed("derivative", "derivative solve breaks down", !d.converged || !(gap <= DERIVATIVE_RTOL), detail)
        } else {
            Verdict::keyed("derivative", "derivative solve converges", d.converged && gap <= DERIVATIVE_RTOL, detail)
        });
    }
    v
}

fn counterexample_cmd(cfg: &RunConfig, dump: Option<Dump>, quiet: bool) -> Result<Vec<Verdict>, CliError> {
    let cx = cfg.counterexample()?;
    if let Some(d) = dump {
        write_dump(cfg, &scenarios::system(), cx.nx, d)?;
    }
    if !quiet {
        eprintln!("counterexample: nx = {}, nt = {:?}, mode {:?}", cx.nx, cx.nt_list, cx.mode);
    }
    let rep = counterexample_scenario(cx)?;
    let mut verdicts = counterexample_verdicts(&rep);
    for v in &mut verdicts {
        v.requested = cfg.requested_verdicts.iter().any(|k| *k == v.key);
    }
    if let Some(grid) = rep.grid {
        let t: Vec<f64> = (0..grid.ntn()).map(|k| grid.t(k)).collect();
        io::write_atomic(&out(cfg, &cfg.output.trace_csv), io::columns_csv(&["t", "u2_at_0"], &[&t, &rep.trace]).as_bytes())?;
    }
    io::write_json(
        &out(cfg, &cfg.output.json),
        &CounterexampleDocument {
            schema_version: SCHEMA_VERSION,
            command: "counterexample",
            t0: T0,
            control: CONTROL,
            report: &rep,
            verdicts: &verdicts,
        },
    )?;
    write_norms(cfg, &rep.conditions)?;
    Ok(verdicts)
}
