//! TOML run configuration.
//!
//! The file is parsed into raw serde structs first, then validated into
//! core types. Blocks are optional at parse time; each subcommand asks for
//! the blocks it needs and gets a [`ConfigError::MissingBlock`] otherwise.

use std::fmt;
use std::path::{Path, PathBuf};

use charstrip_core::boundary::{BoundaryError, RowTerm, Term};
use charstrip_core::expr::{Compiled, Var};
use charstrip_core::fields::{DiagonalSystem, FieldError, Grid, QuasilinearSystem, TimeTopology};
use charstrip_core::linear_solver::SolverOptions;
use charstrip_core::quasilinear_solver::QuasilinearOptions;
use charstrip_core::scenarios::{CounterexampleConfig, RegularityMode};
use charstrip_core::BoundaryOperatorSpec;
use serde::Deserialize;
use thiserror::Error;

/// Smallest admissible `nx` and `nt`.
pub const MIN_GRID: usize = 8;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: cannot read: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("{path}: missing [{block}] block")]
    MissingBlock { path: PathBuf, block: &'static str },
    #[error("{path}: {field}: {message}")]
    Invalid { path: PathBuf, field: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Linear,
    Quasilinear,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Linear => "linear",
            Mode::Quasilinear => "quasilinear",
        })
    }
}

/// A number or a constant expression such as `"2*pi"`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Num(f64),
    Text(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: Option<RawSystem>,
    boundary: Option<RawBoundary>,
    rhs: Option<RawRhs>,
    grid: Option<RawGrid>,
    #[serde(default)]
    solver: RawSolver,
    #[serde(default)]
    output: RawOutput,
    counterexample: Option<RawCounterexample>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    mode: Mode,
    m: usize,
    n: Option<usize>,
    a: Option<Vec<String>>,
    b: Option<Vec<Vec<String>>>,
    q: Option<Vec<Vec<String>>>,
    #[serde(rename = "A")]
    amat: Option<Vec<Vec<String>>>,
    eigenvalues: Option<Vec<String>>,
    #[serde(rename = "B")]
    bmat: Option<Vec<Vec<String>>>,
    #[serde(rename = "Q")]
    qmat: Option<Vec<Vec<String>>>,
    lambda0: Option<f64>,
    delta0: Option<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BoundaryKind {
    Periodic,
    General,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBoundary {
    kind: BoundaryKind,
    reflection: Option<Vec<Vec<String>>>,
    #[serde(default)]
    terms: Vec<RawTerm>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTerm {
    row: usize,
    col: usize,
    coef: Option<String>,
    delay: Option<String>,
    kernel: Option<String>,
    horizon: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRhs {
    #[serde(alias = "g")]
    f: Option<Vec<String>>,
    h: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Topology {
    #[default]
    Periodic,
    Window,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    nx: usize,
    nt: usize,
    #[serde(default)]
    topology: Topology,
    period: Option<Scalar>,
    origin: Option<Scalar>,
    t_lo: Option<Scalar>,
    t_hi: Option<Scalar>,
    spin_up: Option<Scalar>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    tol: Option<f64>,
    max_iter: Option<usize>,
    inner_tol: Option<f64>,
    stall_ratio: Option<f64>,
    patience: Option<usize>,
    oversample: Option<usize>,
    margin: Option<f64>,
    allow_unsatisfied: Option<bool>,
    #[serde(default)]
    derivative: bool,
    outer_tol: Option<f64>,
    max_outer: Option<usize>,
    smallness: Option<f64>,
    skip_smallness_gate: Option<bool>,
    divergence_patience: Option<usize>,
    verify_period: Option<Scalar>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    csv: Option<String>,
    json: Option<String>,
    derivative_csv: Option<String>,
    checkpoint: Option<String>,
    norms: Option<String>,
    trace_csv: Option<String>,
    #[serde(default)]
    probes: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawMode {
    Critical,
    Subcritical,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCounterexample {
    r2: Option<f64>,
    beta: Option<f64>,
    mode: RawMode,
    s: Option<f64>,
    nx: Option<usize>,
    nt_list: Option<Vec<usize>>,
    steps: Option<Vec<f64>>,
    #[serde(default)]
    derivative: bool,
    verdicts: Option<Vec<String>>,
}

/// Keys of the counterexample verdicts, in report order.
pub const COUNTEREXAMPLE_VERDICTS: [&str; 5] = ["amplification", "u2", "t0", "control", "derivative"];

/// Validated system block.
#[derive(Debug, Clone)]
pub enum SystemConfig {
    Linear { system: DiagonalSystem, q: Option<Vec<Vec<Compiled>>> },
    Quasilinear { system: QuasilinearSystem },
}

impl SystemConfig {
    pub fn n(&self) -> usize {
        match self {
            SystemConfig::Linear { system, .. } => system.n,
            SystemConfig::Quasilinear { system } => system.n,
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            SystemConfig::Linear { .. } => Mode::Linear,
            SystemConfig::Quasilinear { .. } => Mode::Quasilinear,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub csv: String,
    pub json: String,
    pub derivative_csv: String,
    pub checkpoint: Option<String>,
    pub norms: String,
    pub trace_csv: String,
    /// `(x, t)` points reported in the JSON.
    pub probes: Vec<[f64; 2]>,
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub nx: Option<usize>,
    pub nt: Option<usize>,
    pub out: Option<PathBuf>,
}

/// A validated configuration file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub path: PathBuf,
    system: Option<SystemConfig>,
    boundary: Option<BoundaryOperatorSpec>,
    f: Option<Vec<Compiled>>,
    h: Option<Vec<Compiled>>,
    grid: Option<Grid>,
    pub solver: SolverOptions,
    pub quasilinear: QuasilinearOptions,
    pub derivative: bool,
    /// Period checked on window grids.
    pub verify_period: Option<f64>,
    pub output: OutputConfig,
    counterexample: Option<CounterexampleConfig>,
    /// Counterexample verdicts that decide the exit code.
    pub requested_verdicts: Vec<String>,
}

struct Ctx<'a> {
    path: &'a Path,
}

impl Ctx<'_> {
    fn invalid(&self, field: impl Into<String>, message: impl fmt::Display) -> ConfigError {
        ConfigError::Invalid { path: self.path.to_path_buf(), field: field.into(), message: message.to_string() }
    }

    fn expr(&self, field: &str, text: &str, allowed: &[Var]) -> Result<Compiled, ConfigError> {
        let c = Compiled::parse(text).map_err(|e| self.invalid(field, format!("`{text}`: {e}")))?;
        if let Some(v) = c.expr.free_vars().into_iter().find(|v| !allowed.contains(v)) {
            let names: Vec<String> = allowed.iter().map(|v| v.name()).collect();
            let legal = if names.is_empty() { "none".to_string() } else { names.join(", ") };
            return Err(self.invalid(field, format!("variable `{}` is not allowed here (allowed: {legal})", v.name())));
        }
        Ok(c)
    }

    fn scalar(&self, field: &str, s: &Scalar) -> Result<f64, ConfigError> {
        let v = match s {
            Scalar::Num(v) => *v,
            Scalar::Text(t) => self.expr(field, t, &[])?.at(0.0, 0.0),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.invalid(field, "must be finite"))
        }
    }

    fn vector(&self, field: &str, v: &[String], n: usize, allowed: &[Var]) -> Result<Vec<Compiled>, ConfigError> {
        if v.len() != n {
            return Err(self.invalid(field, format!("expected {n} entries, got {}", v.len())));
        }
        v.iter().enumerate().map(|(j, s)| self.expr(&format!("{field}[{}]", j + 1), s, allowed)).collect()
    }

    fn matrix(&self, field: &str, m: &[Vec<String>], n: usize, allowed: &[Var]) -> Result<Vec<Vec<Compiled>>, ConfigError> {
        if m.len() != n || m.iter().any(|r| r.len() != n) {
            return Err(self.invalid(field, format!("expected a {n} x {n} matrix")));
        }
        m.iter()
            .enumerate()
            .map(|(j, r)| {
                r.iter().enumerate().map(|(k, s)| self.expr(&format!("{field}[{}][{}]", j + 1, k + 1), s, allowed)).collect()
            })
            .collect()
    }

    fn zeros(n: usize) -> Vec<Vec<Compiled>> {
        vec![vec![Compiled::constant(0.0); n]; n]
    }

    fn field_error(&self, block: &str, e: FieldError) -> ConfigError {
        match e {
            FieldError::IllegalVariable { slot, var } => {
                self.invalid(format!("{block}.{slot}"), format!("variable `{var}` is not allowed here"))
            }
            other => self.invalid(block, other),
        }
    }

    fn system(&self, raw: &RawSystem) -> Result<SystemConfig, ConfigError> {
        let need = |name: &str| self.invalid(format!("system.{name}"), format!("required in {} mode", raw.mode));
        let n = match raw.mode {
            Mode::Linear => raw.a.as_ref().ok_or_else(|| need("a"))?.len(),
            Mode::Quasilinear => raw.eigenvalues.as_ref().ok_or_else(|| need("eigenvalues"))?.len(),
        };
        if n == 0 {
            return Err(self.invalid("system", "need at least one component"));
        }
        if let Some(declared) = raw.n {
            if declared != n {
                return Err(self.invalid("system.n", format!("declared {declared}, but the coefficients have {n} components")));
            }
        }
        if raw.m > n {
            return Err(self.invalid("system.m", format!("{} exceeds n = {n}", raw.m)));
        }
        match raw.mode {
            Mode::Linear => {
                for (name, present) in [
                    ("A", raw.amat.is_some()),
                    ("B", raw.bmat.is_some()),
                    ("Q", raw.qmat.is_some()),
                    ("eigenvalues", raw.eigenvalues.is_some()),
                ] {
                    if present {
                        return Err(self.invalid(format!("system.{name}"), "only used in quasilinear mode"));
                    }
                }
                let xt = [Var::X, Var::T];
                let a = self.vector("system.a", raw.a.as_deref().unwrap_or_default(), n, &xt)?;
                let b = match &raw.b {
                    Some(b) => self.matrix("system.b", b, n, &xt)?,
                    None => Self::zeros(n),
                };
                let q = raw.q.as_ref().map(|q| self.matrix("system.q", q, n, &xt)).transpose()?;
                let system = DiagonalSystem::new(raw.m, a, b).map_err(|e| self.field_error("system", e))?;
                Ok(SystemConfig::Linear { system, q })
            }
            Mode::Quasilinear => {
                for (name, present) in [("a", raw.a.is_some()), ("b", raw.b.is_some()), ("q", raw.q.is_some())] {
                    if present {
                        return Err(self.invalid(format!("system.{name}"), "only used in linear mode; use the upper-case name"));
                    }
                }
                let mut allowed = vec![Var::X, Var::T];
                allowed.extend((0..n).map(|i| Var::V(i as u16)));
                let amat = self.matrix("system.A", raw.amat.as_ref().ok_or_else(|| need("A"))?, n, &allowed)?;
                let eig = self.vector("system.eigenvalues", raw.eigenvalues.as_deref().unwrap_or_default(), n, &allowed)?;
                let bmat = match &raw.bmat {
                    Some(b) => self.matrix("system.B", b, n, &allowed)?,
                    None => Self::zeros(n),
                };
                let qmat = self.matrix("system.Q", raw.qmat.as_ref().ok_or_else(|| need("Q"))?, n, &allowed)?;
                let system = QuasilinearSystem::new(raw.m, amat, eig, bmat, qmat).map_err(|e| self.field_error("system", e))?;
                Ok(SystemConfig::Quasilinear { system })
            }
        }
    }

    fn boundary(&self, raw: &RawBoundary, n: usize) -> Result<BoundaryOperatorSpec, ConfigError> {
        match raw.kind {
            BoundaryKind::Periodic => {
                if raw.reflection.is_some() || !raw.terms.is_empty() {
                    return Err(self.invalid("boundary", "a periodic boundary takes no reflection or terms"));
                }
                Ok(BoundaryOperatorSpec::Periodic { n })
            }
            BoundaryKind::General => {
                let mut rows: Vec<Vec<RowTerm>> = vec![Vec::new(); n];
                let t_only = [Var::T];
                if let Some(r) = &raw.reflection {
                    let m = self.matrix("boundary.reflection", r, n, &t_only)?;
                    for (j, row) in m.into_iter().enumerate() {
                        for (k, coef) in row.into_iter().enumerate() {
                            if !coef.is_zero() {
                                rows[j].push(RowTerm { col: k, term: Term::Point { coef, delay: Compiled::constant(0.0) } });
                            }
                        }
                    }
                }
                for (idx, t) in raw.terms.iter().enumerate() {
                    let field = format!("boundary.terms[{}]", idx + 1);
                    if t.row == 0 || t.row > n || t.col == 0 || t.col > n {
                        return Err(self.invalid(&field, format!("row and col must lie in 1..={n}")));
                    }
                    let term = match (&t.coef, &t.kernel) {
                        (Some(coef), None) => {
                            if t.horizon.is_some() {
                                return Err(self.invalid(&field, "horizon belongs to kernel terms"));
                            }
                            let coef = self.expr(&format!("{field}.coef"), coef, &t_only)?;
                            let delay = match &t.delay {
                                Some(d) => self.expr(&format!("{field}.delay"), d, &t_only)?,
                                None => Compiled::constant(0.0),
                            };
                            Term::Point { coef, delay }
                        }
                        (None, Some(kernel)) => {
                            if t.delay.is_some() {
                                return Err(self.invalid(&field, "delay belongs to point terms"));
                            }
                            let p = self.expr(&format!("{field}.kernel"), kernel, &[Var::T, Var::Tau])?;
                            let horizon =
                                t.horizon.as_ref().ok_or_else(|| self.invalid(&field, "kernel terms need a horizon"))?;
                            let horizon = self.expr(&format!("{field}.horizon"), horizon, &t_only)?;
                            Term::Kernel { p, horizon }
                        }
                        _ => return Err(self.invalid(&field, "give exactly one of coef and kernel")),
                    };
                    rows[t.row - 1].push(RowTerm { col: t.col - 1, term });
                }
                BoundaryOperatorSpec::general(n, rows).map_err(|e| match e {
                    BoundaryError::IllegalVariable { slot, var } => {
                        self.invalid(format!("boundary.{slot}"), format!("variable `{var}` is not allowed here"))
                    }
                    other => self.invalid("boundary", other),
                })
            }
        }
    }

    fn grid(&self, raw: &RawGrid, ov: &Overrides) -> Result<Grid, ConfigError> {
        let nx = ov.nx.unwrap_or(raw.nx);
        let nt = ov.nt.unwrap_or(raw.nt);
        for (name, v) in [("grid.nx", nx), ("grid.nt", nt)] {
            if v < MIN_GRID {
                return Err(self.invalid(name, format!("{v} is below the minimum {MIN_GRID}")));
            }
        }
        let get = |name: &str, s: &Option<Scalar>| -> Result<Option<f64>, ConfigError> {
            s.as_ref().map(|s| self.scalar(&format!("grid.{name}"), s)).transpose()
        };
        let topology = match raw.topology {
            Topology::Periodic => {
                for (name, s) in [("t_lo", &raw.t_lo), ("t_hi", &raw.t_hi), ("spin_up", &raw.spin_up)] {
                    if s.is_some() {
                        return Err(self.invalid(format!("grid.{name}"), "only used with topology = \"window\""));
                    }
                }
                let period =
                    get("period", &raw.period)?.ok_or_else(|| self.invalid("grid.period", "required for a periodic grid"))?;
                TimeTopology::Periodic { period, origin: get("origin", &raw.origin)?.unwrap_or(0.0) }
            }
            Topology::Window => {
                for (name, s) in [("period", &raw.period), ("origin", &raw.origin)] {
                    if s.is_some() {
                        return Err(self.invalid(format!("grid.{name}"), "only used with topology = \"periodic\""));
                    }
                }
                let t_lo = get("t_lo", &raw.t_lo)?.ok_or_else(|| self.invalid("grid.t_lo", "required for a window grid"))?;
                let t_hi = get("t_hi", &raw.t_hi)?.ok_or_else(|| self.invalid("grid.t_hi", "required for a window grid"))?;
                TimeTopology::Window { t_lo, t_hi, spin_up: get("spin_up", &raw.spin_up)?.unwrap_or(0.0) }
            }
        };
        Grid::new(nx, nt, topology).map_err(|e| self.invalid("grid", e))
    }

    fn solver(&self, raw: &RawSolver) -> Result<(SolverOptions, QuasilinearOptions), ConfigError> {
        let mut s = SolverOptions::default();
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(s.tol, raw.tol);
        set!(s.max_iter, raw.max_iter);
        s.inner_tol = raw.inner_tol.or(s.inner_tol);
        set!(s.stall_ratio, raw.stall_ratio);
        set!(s.patience, raw.patience);
        set!(s.oversample, raw.oversample);
        set!(s.margin, raw.margin);
        set!(s.allow_unsatisfied, raw.allow_unsatisfied);
        for (name, v) in [("solver.tol", s.tol), ("solver.stall_ratio", s.stall_ratio)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(self.invalid(name, "must be positive"));
            }
        }
        if !(s.margin >= 0.0 && s.margin < 1.0) {
            return Err(self.invalid("solver.margin", "must lie in [0, 1)"));
        }
        for (name, v) in [("solver.max_iter", s.max_iter), ("solver.patience", s.patience), ("solver.oversample", s.oversample)] {
            if v == 0 {
                return Err(self.invalid(name, "must be at least 1"));
            }
        }
        let mut q = QuasilinearOptions { linear: s, ..QuasilinearOptions::default() };
        set!(q.tol, raw.outer_tol);
        set!(q.max_outer, raw.max_outer);
        set!(q.smallness, raw.smallness);
        set!(q.skip_smallness_gate, raw.skip_smallness_gate);
        set!(q.divergence_patience, raw.divergence_patience);
        if !(q.tol > 0.0 && q.tol.is_finite()) {
            return Err(self.invalid("solver.outer_tol", "must be positive"));
        }
        if q.max_outer == 0 || q.divergence_patience == 0 {
            return Err(self.invalid("solver", "max_outer and divergence_patience must be at least 1"));
        }
        Ok((s, q))
    }

    fn counterexample(
        &self,
        raw: &RawCounterexample,
        solver: SolverOptions,
        ov: &Overrides,
    ) -> Result<CounterexampleConfig, ConfigError> {
        let d = CounterexampleConfig::default();
        let mode = match (raw.mode, raw.s) {
            (RawMode::Critical, None) => RegularityMode::Critical,
            (RawMode::Critical, Some(_)) => return Err(self.invalid("counterexample.s", "only used in subcritical mode")),
            (RawMode::Subcritical, Some(s)) if s > 0.0 && s < 1.0 => RegularityMode::Subcritical { s },
            (RawMode::Subcritical, Some(s)) => return Err(self.invalid("counterexample.s", format!("{s} must lie in (0, 1)"))),
            (RawMode::Subcritical, None) => return Err(self.invalid("counterexample.s", "required in subcritical mode")),
        };
        let nx = ov.nx.or(raw.nx).unwrap_or(d.nx);
        let nt_list = match ov.nt {
            Some(nt) => vec![nt],
            None => raw.nt_list.clone().unwrap_or(d.nt_list),
        };
        if nx < MIN_GRID || nt_list.is_empty() || nt_list.iter().any(|&v| v < MIN_GRID) {
            return Err(self.invalid("counterexample", format!("nx and every nt_list entry must be at least {MIN_GRID}")));
        }
        let steps = raw.steps.clone().unwrap_or(d.steps);
        if steps.len() < 2 || steps.iter().any(|h| !(*h > 0.0)) {
            return Err(self.invalid("counterexample.steps", "need at least two positive steps"));
        }
        Ok(CounterexampleConfig {
            r2: raw.r2.unwrap_or(d.r2),
            beta: raw.beta.unwrap_or(d.beta),
            mode,
            nx,
            nt_list,
            steps,
            solver,
            derivative: raw.derivative,
        })
    }
}

impl RunConfig {
    /// Reads and validates `path`.
    pub fn load(path: &Path, ov: &Overrides) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        RunConfig::parse(&text, path, ov)
    }

    /// Validates TOML text; `path` is only used in messages.
    pub fn parse(text: &str, path: &Path, ov: &Overrides) -> Result<RunConfig, ConfigError> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| ConfigError::Syntax { path: path.to_path_buf(), message: e.to_string() })?;
        let cx = Ctx { path };
        let system = raw.system.as_ref().map(|s| cx.system(s)).transpose()?;
        let n = system.as_ref().map(SystemConfig::n);
        let boundary = match (&raw.boundary, n) {
            (Some(b), Some(n)) => Some(cx.boundary(b, n)?),
            (Some(_), None) => return Err(ConfigError::MissingBlock { path: path.to_path_buf(), block: "system" }),
            (None, _) => None,
        };
        let (f, h) = match n {
            Some(n) => {
                let rhs = raw.rhs.unwrap_or_default();
                let zero = vec![Compiled::constant(0.0); n];
                let f = match &rhs.f {
                    Some(f) => cx.vector("rhs.f", f, n, &[Var::X, Var::T])?,
                    None => zero.clone(),
                };
                let h = match &rhs.h {
                    Some(h) => cx.vector("rhs.h", h, n, &[Var::T])?,
                    None => zero,
                };
                (Some(f), Some(h))
            }
            None if raw.rhs.is_some() => return Err(ConfigError::MissingBlock { path: path.to_path_buf(), block: "system" }),
            None => (None, None),
        };
        let grid = raw.grid.as_ref().map(|g| cx.grid(g, ov)).transpose()?;
        let (solver, mut quasilinear) = cx.solver(&raw.solver)?;
        if let Some(raw_sys) = &raw.system {
            if let Some(l) = raw_sys.lambda0 {
                if !(l > 0.0) {
                    return Err(cx.invalid("system.lambda0", "must be positive"));
                }
                quasilinear.lambda0 = l;
            }
            if let Some(d) = raw_sys.delta0 {
                if !(d > 0.0) {
                    return Err(cx.invalid("system.delta0", "must be positive"));
                }
                quasilinear.delta0 = d;
            }
        }
        let verify_period = raw.solver.verify_period.as_ref().map(|s| cx.scalar("solver.verify_period", s)).transpose()?;
        if let Some(p) = verify_period {
            if !(p > 0.0) {
                return Err(cx.invalid("solver.verify_period", "must be positive"));
            }
        }
        quasilinear.period = verify_period;
        let counterexample = raw.counterexample.as_ref().map(|c| cx.counterexample(c, solver, ov)).transpose()?;
        let requested_verdicts = match raw.counterexample.as_ref().and_then(|c| c.verdicts.clone()) {
            Some(list) => {
                if let Some(bad) = list.iter().find(|k| !COUNTEREXAMPLE_VERDICTS.contains(&k.as_str())) {
                    return Err(cx.invalid(
                        "counterexample.verdicts",
                        format!("unknown verdict `{bad}` (known: {})", COUNTEREXAMPLE_VERDICTS.join(", ")),
                    ));
                }
                list
            }
            None => COUNTEREXAMPLE_VERDICTS.iter().map(|k| k.to_string()).collect(),
        };
        let o = raw.output;
        let dir = match (&ov.out, o.dir) {
            (Some(d), _) => d.clone(),
            (None, Some(d)) => d,
            (None, None) => PathBuf::from("out"),
        };
        let output = OutputConfig {
            dir,
            csv: o.csv.unwrap_or_else(|| "solution.csv".into()),
            json: o.json.unwrap_or_else(|| "report.json".into()),
            derivative_csv: o.derivative_csv.unwrap_or_else(|| "derivative.csv".into()),
            checkpoint: o.checkpoint,
            norms: o.norms.unwrap_or_else(|| "norms.json".into()),
            trace_csv: o.trace_csv.unwrap_or_else(|| "trace.csv".into()),
            probes: o.probes,
        };
        Ok(RunConfig {
            path: path.to_path_buf(),
            system,
            boundary,
            f,
            h,
            grid,
            solver,
            quasilinear,
            derivative: raw.solver.derivative,
            verify_period,
            output,
            counterexample,
            requested_verdicts,
        })
    }

    fn missing(&self, block: &'static str) -> ConfigError {
        ConfigError::MissingBlock { path: self.path.clone(), block }
    }

    pub fn system(&self) -> Result<&SystemConfig, ConfigError> {
        self.system.as_ref().ok_or_else(|| self.missing("system"))
    }

    pub fn boundary(&self) -> Result<&BoundaryOperatorSpec, ConfigError> {
        self.boundary.as_ref().ok_or_else(|| self.missing("boundary"))
    }

    pub fn grid(&self) -> Result<Grid, ConfigError> {
        self.grid.ok_or_else(|| self.missing("grid"))
    }

    /// Interior data `f` (or `g` in linear mode); zero when `[rhs]` omits it.
    pub fn f(&self) -> Result<&[Compiled], ConfigError> {
        self.f.as_deref().ok_or_else(|| self.missing("system"))
    }

    pub fn h(&self) -> Result<&[Compiled], ConfigError> {
        self.h.as_deref().ok_or_else(|| self.missing("system"))
    }

    pub fn counterexample(&self) -> Result<&CounterexampleConfig, ConfigError> {
        self.counterexample.as_ref().ok_or_else(|| self.missing("counterexample"))
    }

    /// Checks that the blocks of a `check` or `solve-*` run are present and consistent.
    pub fn require_problem(&self, mode: Option<Mode>) -> Result<(), ConfigError> {
        let sys = self.system()?;
        self.boundary()?;
        self.grid()?;
        if let Some(m) = mode {
            if sys.mode() != m {
                return Err(ConfigError::Invalid {
                    path: self.path.clone(),
                    field: "system.mode".into(),
                    message: format!("is \"{}\", but this subcommand needs \"{m}\"", sys.mode()),
                });
            }
        }
        Ok(())
    }
}
