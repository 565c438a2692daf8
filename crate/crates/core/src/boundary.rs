//! Boundary operators of reflection, delay and integral type:
//!
//! `(RZ)_j(t) = Σ_k [ r_jk(t) Z_k(t - θ_jk(t)) + ∫_0^{ϑ_jk(t)} p_jk(t, τ) Z_k(t - τ) dτ ]`
//!
//! The family is closed under the differentiation rule
//! `d/dt (RZ) = R'Z + R̃ Z'`, so the derived operators are again term lists.
//! Kernel integrals use the composite trapezoid rule with a step no larger
//! than the grid's time step.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Compiled, Expr, Var};
use crate::fields::{Grid, TimeTopology};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundaryError {
    #[error("row {row}: lookback to t = {lookback:.6} precedes the window start {t_lo:.6}")]
    LookbackOutOfWindow { row: usize, lookback: f64, t_lo: f64 },
    #[error("row {row}, column {col}: {what} = {value:.6e} < 0 at t = {t:.6}")]
    Negative { row: usize, col: usize, what: &'static str, t: f64, value: f64 },
    #[error("delays plus horizons reach back {needed:.6}, more than the spin-up margin {spin_up:.6}")]
    SpinUpTooShort { needed: f64, spin_up: f64 },
    #[error("boundary expression `{slot}` uses variable `{var}`; only t (and tau in kernels) are allowed")]
    IllegalVariable { slot: String, var: String },
    #[error("boundary shape: {0}")]
    Shape(String),
}

/// One summand of a boundary row.
#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    /// `coef(t) Z_k(t - delay(t))`.
    Point { coef: Compiled, delay: Compiled },
    /// `∫_0^{horizon(t)} p(t, τ) Z_k(t - τ) dτ`.
    Kernel { p: Compiled, horizon: Compiled },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowTerm {
    /// Zero-based trace component `k`.
    pub col: usize,
    pub term: Term,
}

/// Which operator of the derived family to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DerivedKind {
    R,
    Rprime,
    Rtilde,
    RtildePrime,
    Rhat,
}

/// A boundary operator: the periodic identity or a general term list.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryOperatorSpec {
    /// `(RZ)_j = Z_j`: the boundary value at one end equals the trace at the other.
    Periodic {
        n: usize,
    },
    General {
        n: usize,
        rows: Vec<Vec<RowTerm>>,
    },
}

/// Component traces `Z_k(t)`.
pub trait Traces {
    fn value(&self, k: usize, t: f64) -> f64;
}

impl<F: Fn(usize, f64) -> f64> Traces for F {
    fn value(&self, k: usize, t: f64) -> f64 {
        self(k, t)
    }
}

fn kernel_nodes(horizon: f64, dt: f64) -> usize {
    if horizon <= 0.0 {
        0
    } else {
        (libm::ceil(horizon / dt - 1e-9) as usize).max(1)
    }
}

fn check_slot(slot: String, c: &Compiled, kernel: bool) -> Result<(), BoundaryError> {
    for v in c.expr.free_vars() {
        let ok = v == Var::T || (kernel && v == Var::Tau);
        if !ok {
            return Err(BoundaryError::IllegalVariable { slot, var: v.name() });
        }
    }
    Ok(())
}

impl BoundaryOperatorSpec {
    /// Builds a general spec and checks variable usage per slot.
    pub fn general(n: usize, rows: Vec<Vec<RowTerm>>) -> Result<BoundaryOperatorSpec, BoundaryError> {
        if rows.len() != n {
            return Err(BoundaryError::Shape(format!("expected {n} rows, got {}", rows.len())));
        }
        for (j, row) in rows.iter().enumerate() {
            for rt in row {
                if rt.col >= n {
                    return Err(BoundaryError::Shape(format!("row {}: column {} out of range", j + 1, rt.col + 1)));
                }
                let tag = format!("[{}][{}]", j + 1, rt.col + 1);
                match &rt.term {
                    Term::Point { coef, delay } => {
                        check_slot(format!("r{tag}"), coef, false)?;
                        check_slot(format!("theta{tag}"), delay, false)?;
                    }
                    Term::Kernel { p, horizon } => {
                        check_slot(format!("p{tag}"), p, true)?;
                        check_slot(format!("horizon{tag}"), horizon, false)?;
                    }
                }
            }
        }
        Ok(BoundaryOperatorSpec::General { n, rows })
    }

    /// Pure reflection `(RZ)_j = Σ_k r_jk Z_k` from a coefficient matrix of expressions.
    pub fn reflection(r: &[&[&str]]) -> Result<BoundaryOperatorSpec, crate::expr::ParseError> {
        let n = r.len();
        let mut rows = Vec::with_capacity(n);
        for row in r {
            let mut terms = Vec::new();
            for (k, s) in row.iter().enumerate() {
                let coef = Compiled::parse(s)?;
                if !coef.is_zero() {
                    terms.push(RowTerm { col: k, term: Term::Point { coef, delay: Compiled::constant(0.0) } });
                }
            }
            rows.push(terms);
        }
        Ok(BoundaryOperatorSpec::General { n, rows })
    }

    pub fn n(&self) -> usize {
        match self {
            BoundaryOperatorSpec::Periodic { n } | BoundaryOperatorSpec::General { n, .. } => *n,
        }
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self, BoundaryOperatorSpec::Periodic { .. })
    }

    /// True when every coefficient, delay, kernel and horizon is constant in `t`.
    pub fn is_autonomous(&self) -> bool {
        match self {
            BoundaryOperatorSpec::Periodic { .. } => true,
            BoundaryOperatorSpec::General { rows, .. } => rows.iter().flatten().all(|rt| match &rt.term {
                Term::Point { coef, delay } => !coef.expr.depends_on(Var::T) && !delay.expr.depends_on(Var::T),
                Term::Kernel { p, horizon } => !p.expr.depends_on(Var::T) && !horizon.expr.depends_on(Var::T),
            }),
        }
    }

    /// Applies one differentiation step: returns `(R', R̃)` of `self`.
    fn derive_pair(&self) -> (BoundaryOperatorSpec, BoundaryOperatorSpec) {
        match self {
            BoundaryOperatorSpec::Periodic { n } => {
                (BoundaryOperatorSpec::General { n: *n, rows: vec![Vec::new(); *n] }, BoundaryOperatorSpec::Periodic { n: *n })
            }
            BoundaryOperatorSpec::General { n, rows } => {
                let mut prime = Vec::with_capacity(*n);
                let mut tilde = Vec::with_capacity(*n);
                for row in rows {
                    let mut pr = Vec::new();
                    let mut tr = Vec::new();
                    for rt in row {
                        match &rt.term {
                            Term::Point { coef, delay } => {
                                let dcoef = coef.expr.diff(Var::T);
                                if !dcoef.is_zero() {
                                    pr.push(RowTerm {
                                        col: rt.col,
                                        term: Term::Point { coef: Compiled::new(dcoef), delay: delay.clone() },
                                    });
                                }
                                let factor = Expr::sub(Expr::c(1.0), delay.expr.diff(Var::T));
                                let c = Expr::mul(coef.expr.clone(), factor);
                                if !c.is_zero() {
                                    tr.push(RowTerm {
                                        col: rt.col,
                                        term: Term::Point { coef: Compiled::new(c), delay: delay.clone() },
                                    });
                                }
                            }
                            Term::Kernel { p, horizon } => {
                                let dh = horizon.expr.diff(Var::T);
                                let edge = Expr::mul(p.expr.substitute(Var::Tau, &horizon.expr), dh);
                                if !edge.is_zero() {
                                    pr.push(RowTerm {
                                        col: rt.col,
                                        term: Term::Point { coef: Compiled::new(edge), delay: horizon.clone() },
                                    });
                                }
                                let dp = p.expr.diff(Var::T);
                                if !dp.is_zero() {
                                    pr.push(RowTerm {
                                        col: rt.col,
                                        term: Term::Kernel { p: Compiled::new(dp), horizon: horizon.clone() },
                                    });
                                }
                                tr.push(rt.clone());
                            }
                        }
                    }
                    prime.push(pr);
                    tilde.push(tr);
                }
                (BoundaryOperatorSpec::General { n: *n, rows: prime }, BoundaryOperatorSpec::General { n: *n, rows: tilde })
            }
        }
    }

    /// The requested member of the derived family.
    pub fn derived(&self, kind: DerivedKind) -> BoundaryOperatorSpec {
        match kind {
            DerivedKind::R => self.clone(),
            DerivedKind::Rprime => self.derive_pair().0,
            DerivedKind::Rtilde => self.derive_pair().1,
            DerivedKind::RtildePrime => self.derive_pair().1.derive_pair().0,
            DerivedKind::Rhat => self.derive_pair().1.derive_pair().1,
        }
    }

    /// Checks nonnegative delays and horizons on the time nodes and, for a
    /// window, that the lookback fits inside the spin-up margin.
    pub fn validate(&self, grid: &Grid) -> Result<(), BoundaryError> {
        let BoundaryOperatorSpec::General { rows, .. } = self else { return Ok(()) };
        let mut max_delay = 0.0f64;
        let mut max_horizon = 0.0f64;
        for (j, row) in rows.iter().enumerate() {
            for rt in row {
                for k in 0..grid.ntn() {
                    let t = grid.t(k);
                    let (what, v) = match &rt.term {
                        Term::Point { delay, .. } => ("delay", delay.at(0.0, t)),
                        Term::Kernel { horizon, .. } => ("horizon", horizon.at(0.0, t)),
                    };
                    if !(v >= 0.0) {
                        return Err(BoundaryError::Negative { row: j + 1, col: rt.col + 1, what, t, value: v });
                    }
                    match &rt.term {
                        Term::Point { .. } => max_delay = max_delay.max(v),
                        Term::Kernel { .. } => max_horizon = max_horizon.max(v),
                    }
                }
            }
        }
        if let TimeTopology::Window { spin_up, .. } = grid.topology {
            let needed = max_delay + max_horizon;
            if needed > spin_up {
                return Err(BoundaryError::SpinUpTooShort { needed, spin_up });
            }
        }
        Ok(())
    }

    /// Evaluates `(RZ)(t)`. In a window, any lookback before the window start
    /// is an error.
    pub fn apply(&self, z: &dyn Traces, t: f64, grid: &Grid) -> Result<Vec<f64>, BoundaryError> {
        match self {
            BoundaryOperatorSpec::Periodic { n } => Ok((0..*n).map(|k| z.value(k, t)).collect()),
            BoundaryOperatorSpec::General { n, rows } => {
                let t_lo = match grid.topology {
                    TimeTopology::Window { t_lo, .. } => Some(t_lo),
                    TimeTopology::Periodic { .. } => None,
                };
                let dt = grid.dt();
                let mut out = vec![0.0; *n];
                for (j, row) in rows.iter().enumerate() {
                    let mut s = 0.0;
                    for rt in row {
                        let reach = match &rt.term {
                            Term::Point { delay, .. } => delay.at(0.0, t),
                            Term::Kernel { horizon, .. } => horizon.at(0.0, t),
                        };
                        if let Some(lo) = t_lo {
                            if t - reach < lo - 1e-12 * (1.0 + lo.abs()) {
                                return Err(BoundaryError::LookbackOutOfWindow { row: j + 1, lookback: t - reach, t_lo: lo });
                            }
                        }
                        s += term_value(&rt.term, rt.col, z, t, dt);
                    }
                    out[j] = s;
                }
                Ok(out)
            }
        }
    }

    /// Row bound `sup_t Σ_k (|r_jk(t)| + ∫_0^{ϑ_jk(t)} |p_jk(t, τ)| dτ)` over the time nodes.
    pub fn row_norm(&self, j: usize, grid: &Grid) -> f64 {
        match self {
            BoundaryOperatorSpec::Periodic { .. } => 1.0,
            BoundaryOperatorSpec::General { rows, .. } => {
                let dt = grid.dt();
                let mut sup = 0.0f64;
                for k in 0..grid.ntn() {
                    let t = grid.t(k);
                    let s: f64 = rows[j].iter().map(|rt| term_abs(&rt.term, t, dt)).sum();
                    sup = sup.max(s);
                }
                sup
            }
        }
    }

    pub fn row_norms(&self, grid: &Grid) -> Vec<f64> {
        (0..self.n()).map(|j| self.row_norm(j, grid)).collect()
    }
}

fn term_value(term: &Term, col: usize, z: &dyn Traces, t: f64, dt: f64) -> f64 {
    match term {
        Term::Point { coef, delay } => coef.at(0.0, t) * z.value(col, t - delay.at(0.0, t)),
        Term::Kernel { p, horizon } => {
            let th = horizon.at(0.0, t);
            let nq = kernel_nodes(th, dt);
            if nq == 0 {
                return 0.0;
            }
            let h = th / nq as f64;
            let mut s = 0.0;
            for q in 0..=nq {
                let tau = if q == nq { th } else { h * q as f64 };
                let w = if q == 0 || q == nq { 0.5 * h } else { h };
                s += w * p.at_tau(t, tau) * z.value(col, t - tau);
            }
            s
        }
    }
}

fn term_abs(term: &Term, t: f64, dt: f64) -> f64 {
    match term {
        Term::Point { coef, .. } => coef.at(0.0, t).abs(),
        Term::Kernel { p, horizon } => {
            let th = horizon.at(0.0, t);
            let nq = kernel_nodes(th, dt);
            if nq == 0 {
                return 0.0;
            }
            let h = th / nq as f64;
            (0..=nq)
                .map(|q| {
                    let tau = if q == nq { th } else { h * q as f64 };
                    let w = if q == 0 || q == nq { 0.5 * h } else { h };
                    w * p.at_tau(t, tau).abs()
                })
                .sum()
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    col: u32,
    k0: u32,
    k1: u32,
    w0: f64,
    w1: f64,
}

/// A boundary operator resolved on a grid's time nodes: each output node is
/// a fixed linear combination of trace node values (linear interpolation in
/// time; lookbacks before a window start clamp to its first node).
#[derive(Debug, Clone)]
pub struct BoundaryPlan {
    n: usize,
    ntn: usize,
    identity: bool,
    /// Per `(row, node)`: start offset into `samples`.
    offsets: Vec<u32>,
    samples: Vec<Sample>,
}

impl BoundaryPlan {
    pub fn new(spec: &BoundaryOperatorSpec, grid: &Grid) -> BoundaryPlan {
        let n = spec.n();
        let ntn = grid.ntn();
        match spec {
            BoundaryOperatorSpec::Periodic { .. } => {
                BoundaryPlan { n, ntn, identity: true, offsets: Vec::new(), samples: Vec::new() }
            }
            BoundaryOperatorSpec::General { rows, .. } => {
                let dt = grid.dt();
                let mut offsets = Vec::with_capacity(n * ntn + 1);
                let mut samples = Vec::new();
                let push = |samples: &mut Vec<Sample>, col: usize, w: f64, tt: f64| {
                    if w == 0.0 {
                        return;
                    }
                    let st = grid.lin_stencil(tt);
                    samples.push(Sample {
                        col: col as u32,
                        k0: st[0].0 as u32,
                        k1: st[1].0 as u32,
                        w0: w * st[0].1,
                        w1: w * st[1].1,
                    });
                };
                for row in rows {
                    for m in 0..ntn {
                        offsets.push(samples.len() as u32);
                        let t = grid.t(m);
                        for rt in row {
                            match &rt.term {
                                Term::Point { coef, delay } => {
                                    push(&mut samples, rt.col, coef.at(0.0, t), t - delay.at(0.0, t));
                                }
                                Term::Kernel { p, horizon } => {
                                    let th = horizon.at(0.0, t);
                                    let nq = kernel_nodes(th, dt);
                                    if nq == 0 {
                                        continue;
                                    }
                                    let h = th / nq as f64;
                                    for q in 0..=nq {
                                        let tau = if q == nq { th } else { h * q as f64 };
                                        let w = if q == 0 || q == nq { 0.5 * h } else { h };
                                        push(&mut samples, rt.col, w * p.at_tau(t, tau), t - tau);
                                    }
                                }
                            }
                        }
                    }
                }
                offsets.push(samples.len() as u32);
                BoundaryPlan { n, ntn, identity: false, offsets, samples }
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// Applies the plan to trace series `z[k][node]`; returns `out[j][node]`.
    pub fn apply(&self, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
        if self.identity {
            return z.to_vec();
        }
        let mut out = vec![vec![0.0; self.ntn]; self.n];
        for (j, row) in out.iter_mut().enumerate() {
            for (m, dst) in row.iter_mut().enumerate() {
                let r = j * self.ntn + m;
                let (s, e) = (self.offsets[r] as usize, self.offsets[r + 1] as usize);
                let mut acc = 0.0;
                for smp in &self.samples[s..e] {
                    let zc = &z[smp.col as usize];
                    acc += smp.w0 * zc[smp.k0 as usize] + smp.w1 * zc[smp.k1 as usize];
                }
                *dst = acc;
            }
        }
        out
    }

    /// Sum of absolute sample weights per row (the discrete row norm).
    pub fn abs_row_sums(&self) -> Vec<f64> {
        if self.identity {
            return vec![1.0; self.n];
        }
        (0..self.n)
            .map(|j| {
                (0..self.ntn)
                    .map(|m| {
                        let r = j * self.ntn + m;
                        self.samples[self.offsets[r] as usize..self.offsets[r + 1] as usize]
                            .iter()
                            .map(|s| s.w0.abs() + s.w1.abs())
                            .sum::<f64>()
                    })
                    .fold(0.0f64, f64::max)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn grid() -> Grid {
        Grid::periodic(8, 256, 2.0 * core::f64::consts::PI, 0.0).unwrap()
    }

    fn point(col: usize, coef: &str, delay: &str) -> RowTerm {
        RowTerm { col, term: Term::Point { coef: Compiled::parse(coef).unwrap(), delay: Compiled::parse(delay).unwrap() } }
    }

    fn kernel(col: usize, p: &str, h: &str) -> RowTerm {
        RowTerm { col, term: Term::Kernel { p: Compiled::parse(p).unwrap(), horizon: Compiled::parse(h).unwrap() } }
    }

    #[test]
    fn periodic_is_identity() {
        let spec = BoundaryOperatorSpec::Periodic { n: 2 };
        let z = |k: usize, t: f64| k as f64 + t;
        assert_eq!(spec.apply(&z, 0.5, &grid()).unwrap(), vec![0.5, 1.5]);
        assert_eq!(spec.row_norm(0, &grid()), 1.0);
    }

    #[test]
    fn counterexample_row_one() {
        let spec =
            BoundaryOperatorSpec::general(2, vec![vec![point(1, "0.8+0.05*sin(t-0.25)", "0")], vec![point(0, "0.9", "0")]])
                .unwrap();
        let z = |k: usize, t: f64| if k == 1 { libm::cos(t) } else { 7.0 };
        let t = 1.1;
        let v = spec.apply(&z, t, &grid()).unwrap();
        assert!((v[0] - (0.8 + 0.05 * libm::sin(t - 0.25)) * libm::cos(t)).abs() < 1e-15);
        assert!((v[1] - 6.3).abs() < 1e-15);
        let rp = spec.derived(DerivedKind::Rprime);
        let v = rp.apply(&z, t, &grid()).unwrap();
        assert!((v[0] - 0.05 * libm::cos(t - 0.25) * libm::cos(t)).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
        let rt = spec.derived(DerivedKind::Rtilde);
        let v = rt.apply(&z, t, &grid()).unwrap();
        assert!((v[0] - (0.8 + 0.05 * libm::sin(t - 0.25)) * libm::cos(t)).abs() < 1e-15);
    }

    #[test]
    fn constant_kernel_reproduces_constant() {
        let spec = BoundaryOperatorSpec::general(1, vec![vec![kernel(0, "1", "1")]]).unwrap();
        let v = spec.apply(&|_: usize, _: f64| 2.5, 3.0, &grid()).unwrap();
        assert!((v[0] - 2.5).abs() < 1e-14);
    }

    #[test]
    fn autonomous_reflection_derivatives() {
        let spec = BoundaryOperatorSpec::general(1, vec![vec![point(0, "0.7", "0.3")]]).unwrap();
        assert!(spec.is_autonomous());
        let z = |_: usize, t: f64| libm::sin(t);
        let g = grid();
        for kind in [DerivedKind::Rtilde, DerivedKind::Rhat] {
            let a = spec.derived(kind).apply(&z, 0.9, &g).unwrap();
            let b = spec.apply(&z, 0.9, &g).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(spec.derived(DerivedKind::Rprime).apply(&z, 0.9, &g).unwrap(), vec![0.0]);
    }

    #[test]
    fn pure_delay_tilde() {
        let spec = BoundaryOperatorSpec::general(1, vec![vec![point(0, "1", "0.1*sin(t)")]]).unwrap();
        let rt = spec.derived(DerivedKind::Rtilde);
        let z = |_: usize, t: f64| libm::exp(0.3 * t);
        for t in [0.0, 0.7, 2.0] {
            let expect = z(0, t - 0.1 * libm::sin(t)) * (1.0 - 0.1 * libm::cos(t));
            assert!((rt.apply(&z, t, &grid()).unwrap()[0] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn row_norm_with_kernel() {
        let spec = BoundaryOperatorSpec::general(1, vec![vec![point(0, "0.5", "0"), kernel(0, "0.25", "1")]]).unwrap();
        assert!((spec.row_norm(0, &grid()) - 0.75).abs() < 1e-14);
    }

    #[test]
    fn window_lookback_is_checked() {
        let g = Grid::window(8, 64, 0.0, 4.0, 1.0).unwrap();
        let spec = BoundaryOperatorSpec::general(1, vec![vec![point(0, "1", "0.5")]]).unwrap();
        assert!(spec.validate(&g).is_ok());
        let z = |_: usize, t: f64| t;
        assert!(matches!(spec.apply(&z, 0.2, &g), Err(BoundaryError::LookbackOutOfWindow { .. })));
        assert!(spec.apply(&z, 0.6, &g).is_ok());
        let long = BoundaryOperatorSpec::general(1, vec![vec![point(0, "1", "0.8"), kernel(0, "1", "0.5")]]).unwrap();
        assert!(matches!(long.validate(&g), Err(BoundaryError::SpinUpTooShort { .. })));
    }

    #[test]
    fn illegal_variables_rejected() {
        let bad = BoundaryOperatorSpec::general(1, vec![vec![point(0, "x", "0")]]);
        assert!(matches!(bad, Err(BoundaryError::IllegalVariable { .. })));
        let bad = BoundaryOperatorSpec::general(1, vec![vec![point(0, "tau", "0")]]);
        assert!(matches!(bad, Err(BoundaryError::IllegalVariable { .. })));
        assert!(BoundaryOperatorSpec::general(1, vec![vec![kernel(0, "tau*t", "1")]]).is_ok());
    }

    #[test]
    fn plan_matches_direct_application_on_nodes() {
        let g = grid();
        let spec = BoundaryOperatorSpec::general(
            2,
            vec![vec![point(1, "0.4+0.1*cos(t)", "0.2"), kernel(0, "exp(-tau)", "0.5+0.1*sin(t)")], vec![point(0, "0.3", "0")]],
        )
        .unwrap();
        let plan = BoundaryPlan::new(&spec, &g);
        let z: Vec<Vec<f64>> = (0..2).map(|c| (0..g.ntn()).map(|k| libm::sin(g.t(k) + c as f64)).collect()).collect();
        let out = plan.apply(&z);
        let tr = |c: usize, t: f64| crate::fields::series_lin(&g, &z[c], t);
        for m in [0usize, 17, 200] {
            let direct = spec.apply(&tr, g.t(m), &g).unwrap();
            for j in 0..2 {
                assert!((out[j][m] - direct[j]).abs() < 1e-13);
            }
        }
    }
}
