//! Dissipativity conditions and the regularity norm conditions.
//!
//! With `γ_j = inf b_jj/|a_j|`, `γ̃_j = inf |b_jj/a_j|` and
//! `β_j = sup Σ_{k≠j} |b_jk/a_j|` (grid extrema), and `φ(γ) = (1-e^{-γ})/γ`:
//!
//! * B1, per row, by the sign of `inf b_jj`:
//!   `‖R_j‖ + β_j φ(γ_j) < 1` (positive), `e^{-γ_j}‖R_j‖ + β_j φ(γ_j) < 1`
//!   (negative), `‖R_j‖ + β_j < 1` (zero).
//! * B2: `inf b_jj > 0`, `e^{-γ_j}‖R_j‖ < 1` and
//!   `(1 + ‖R‖ / (1 - max_i e^{-γ_i}‖R_i‖)) β_j φ(γ_j) < 1`.
//! * B3 (periodic boundary): `inf |b_jj| ≠ 0` and `β_j (2 - e^{-γ̃_j}) / γ̃_j < 1`.
//!
//! The norm conditions compare `‖G_i‖` (or `‖H_i‖`) plus a safety margin with 1.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::BoundaryOperatorSpec;
use crate::fields::{Coefficients, Grid};
use crate::math::phi;
use crate::operators::{estimate_operator_norms, NormEstimates, OperatorError, SIGN_BAND};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConditionError {
    #[error("B3 is inapplicable: row {row} has inf |b_jj| = 0")]
    B3Inapplicable { row: usize },
    #[error("component count mismatch between system and boundary operator")]
    Shape,
}

/// Grid extrema entering the conditions for one row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaBeta {
    pub gamma: f64,
    pub gamma_tilde: f64,
    pub beta: f64,
    pub inf_b: f64,
    pub sup_b: f64,
}

/// Sign class of `inf b_jj` with the dead band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignClass {
    Positive,
    Negative,
    Zero,
}

impl SignClass {
    pub fn of(inf_b: f64) -> SignClass {
        if inf_b.abs() < SIGN_BAND {
            SignClass::Zero
        } else if inf_b > 0.0 {
            SignClass::Positive
        } else {
            SignClass::Negative
        }
    }
}

/// `(γ_j, γ̃_j, β_j)` and the range of `b_jj` over the grid nodes.
pub fn compute_gamma_beta(sys: &dyn Coefficients, grid: &Grid) -> Vec<GammaBeta> {
    let n = sys.n();
    (0..n)
        .map(|j| {
            let mut gb = GammaBeta {
                gamma: f64::INFINITY,
                gamma_tilde: f64::INFINITY,
                beta: 0.0,
                inf_b: f64::INFINITY,
                sup_b: f64::NEG_INFINITY,
            };
            for i in 0..grid.nxn() {
                let x = grid.x(i);
                for k in 0..grid.ntn() {
                    let t = grid.t(k);
                    let a = sys.a(j, x, t);
                    let b = sys.b(j, j, x, t);
                    gb.gamma = gb.gamma.min(b / a.abs());
                    gb.gamma_tilde = gb.gamma_tilde.min((b / a).abs());
                    gb.inf_b = gb.inf_b.min(b);
                    gb.sup_b = gb.sup_b.max(b);
                    let off: f64 = (0..n).filter(|&k2| k2 != j).map(|k2| (sys.b(j, k2, x, t) / a).abs()).sum();
                    gb.beta = gb.beta.max(off);
                }
            }
            gb
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct B1Row {
    pub class: SignClass,
    pub lhs: f64,
    pub pass: bool,
}

pub fn check_b1(gb: &GammaBeta, r_norm: f64) -> B1Row {
    let class = SignClass::of(gb.inf_b);
    let lhs = match class {
        SignClass::Positive => r_norm + gb.beta * phi(gb.gamma),
        SignClass::Negative => libm::exp(-gb.gamma) * r_norm + gb.beta * phi(gb.gamma),
        SignClass::Zero => r_norm + gb.beta,
    };
    B1Row { class, lhs, pass: lhs < 1.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct B2Row {
    pub positive_b: bool,
    /// `e^{-γ_j} ‖R_j‖`.
    pub decay_lhs: f64,
    /// The composite left-hand side.
    pub composite_lhs: f64,
    pub pass: bool,
}

pub fn check_b2(gbs: &[GammaBeta], r_norms: &[f64]) -> Vec<B2Row> {
    let r_max = r_norms.iter().fold(0.0f64, |a, b| a.max(*b));
    let decays: Vec<f64> = gbs.iter().zip(r_norms).map(|(g, r)| libm::exp(-g.gamma) * r).collect();
    let worst = decays.iter().fold(0.0f64, |a, b| a.max(*b));
    let prefactor = if worst < 1.0 { 1.0 + r_max / (1.0 - worst) } else { f64::INFINITY };
    gbs.iter()
        .zip(&decays)
        .map(|(g, &d)| {
            let positive_b = SignClass::of(g.inf_b) == SignClass::Positive;
            let term = g.beta * phi(g.gamma);
            let composite_lhs = if term == 0.0 { 0.0 } else { prefactor * term };
            B2Row { positive_b, decay_lhs: d, composite_lhs, pass: positive_b && d < 1.0 && composite_lhs < 1.0 }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct B3Row {
    pub lhs: f64,
    pub pass: bool,
}

pub fn check_b3(gbs: &[GammaBeta]) -> Result<Vec<B3Row>, ConditionError> {
    gbs.iter()
        .enumerate()
        .map(|(j, g)| {
            let definite = g.inf_b > SIGN_BAND || g.sup_b < -SIGN_BAND;
            if !definite {
                return Err(ConditionError::B3Inapplicable { row: j + 1 });
            }
            let gt = g.gamma_tilde;
            let lhs = if g.beta == 0.0 { 0.0 } else { g.beta * (2.0 - libm::exp(-gt)) / gt };
            Ok(B3Row { lhs, pass: lhs < 1.0 })
        })
        .collect()
}

/// One norm condition: `estimate + margin < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormCheck {
    pub level: usize,
    pub estimate: f64,
    pub margin: f64,
    pub pass: bool,
}

/// Norm conditions for `i = 1, 2`.
pub fn check_norm_conditions(norms: &NormEstimates, margin: f64) -> [NormCheck; 2] {
    [1, 2].map(|i| {
        let estimate = norms.max[i];
        NormCheck { level: i, estimate, margin, pass: estimate + margin < 1.0 }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionOptions {
    pub margin: f64,
    pub oversample: usize,
}

impl Default for ConditionOptions {
    fn default() -> Self {
        ConditionOptions { margin: 0.01, oversample: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub gamma: f64,
    pub gamma_tilde: f64,
    pub beta: f64,
    pub inf_b: f64,
    pub sup_b: f64,
    pub r_norm: f64,
    pub b1: B1Row,
    pub b2: B2Row,
    pub b3: Option<B3Row>,
}

/// All condition data for one system, boundary operator and sampling grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub rows: Vec<RowReport>,
    pub r_max: f64,
    pub b1: bool,
    pub b2: bool,
    /// `None` for a general boundary or when B3 is inapplicable.
    pub b3: Option<bool>,
    pub norms: Option<NormEstimates>,
    pub norm_checks: Option<[NormCheck; 2]>,
    pub bc_solvable: bool,
    pub c1_regular: bool,
    pub c2_regular: bool,
    pub nx: usize,
    pub nt: usize,
    pub margin: f64,
    pub notes: Vec<String>,
}

impl ConditionReport {
    pub fn gamma_beta(&self) -> Vec<GammaBeta> {
        self.rows
            .iter()
            .map(|r| GammaBeta { gamma: r.gamma, gamma_tilde: r.gamma_tilde, beta: r.beta, inf_b: r.inf_b, sup_b: r.sup_b })
            .collect()
    }

    /// Largest B1 left-hand side over the rows.
    pub fn b1_bound(&self) -> f64 {
        self.rows.iter().map(|r| r.b1.lhs).fold(0.0, f64::max)
    }
}

/// Evaluates B1, B2, B3 and the norm conditions on `grid`.
pub fn condition_report(
    sys: &dyn Coefficients,
    boundary: &BoundaryOperatorSpec,
    grid: &Grid,
    opts: &ConditionOptions,
) -> Result<ConditionReport, ConditionError> {
    if sys.n() != boundary.n() {
        return Err(ConditionError::Shape);
    }
    let gbs = compute_gamma_beta(sys, grid);
    let r_norms = boundary.row_norms(grid);
    let b1_rows: Vec<B1Row> = gbs.iter().zip(&r_norms).map(|(g, r)| check_b1(g, *r)).collect();
    let b2_rows = check_b2(&gbs, &r_norms);
    let mut notes = Vec::new();
    let b3_rows = if boundary.is_periodic() {
        match check_b3(&gbs) {
            Ok(r) => Some(r),
            Err(e) => {
                notes.push(format!("{e}"));
                None
            }
        }
    } else {
        None
    };
    let b1 = b1_rows.iter().all(|r| r.pass);
    let b2 = b2_rows.iter().all(|r| r.pass);
    let b3 = b3_rows.as_ref().map(|r| r.iter().all(|x| x.pass));
    let (norms, norm_checks) = match estimate_operator_norms(sys, boundary, grid, opts.oversample) {
        Ok(ne) => {
            let checks = check_norm_conditions(&ne, opts.margin);
            (Some(ne), Some(checks))
        }
        Err(OperatorError::MixedSignB { row, .. }) => {
            notes.push(format!("norm conditions unavailable: row {row} has no definite sign of b_jj"));
            (None, None)
        }
        Err(e) => {
            notes.push(format!("norm estimate failed: {e}"));
            (None, None)
        }
    };
    let bc_solvable = b1 || b2 || b3 == Some(true);
    let c1_regular = bc_solvable && norm_checks.map_or(false, |c| c[0].pass);
    let c2_regular = c1_regular && norm_checks.map_or(false, |c| c[1].pass);
    let rows = gbs
        .iter()
        .enumerate()
        .map(|(j, g)| RowReport {
            gamma: g.gamma,
            gamma_tilde: g.gamma_tilde,
            beta: g.beta,
            inf_b: g.inf_b,
            sup_b: g.sup_b,
            r_norm: r_norms[j],
            b1: b1_rows[j],
            b2: b2_rows[j],
            b3: b3_rows.as_ref().map(|r| r[j]),
        })
        .collect();
    Ok(ConditionReport {
        rows,
        r_max: r_norms.iter().fold(0.0, |a, b| a.max(*b)),
        b1,
        b2,
        b3,
        norms,
        norm_checks,
        bc_solvable,
        c1_regular,
        c2_regular,
        nx: grid.nx,
        nt: grid.nt,
        margin: opts.margin,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::DiagonalSystem;
    use core::f64::consts::PI;

    fn grid() -> Grid {
        Grid::periodic(16, 64, 2.0 * PI, 0.0).unwrap()
    }

    #[test]
    fn gamma_beta_examples() {
        let sys = DiagonalSystem::parse(1, &["1", "-1"], &[&["1", "0.5"], &["0.25", "-1"]]).unwrap();
        let gb = compute_gamma_beta(&sys, &grid());
        assert_eq!((gb[0].gamma, gb[1].gamma), (1.0, -1.0));
        assert_eq!((gb[0].gamma_tilde, gb[1].gamma_tilde), (1.0, 1.0));
        assert_eq!((gb[0].beta, gb[1].beta), (0.5, 0.25));
        let zero = DiagonalSystem::parse(1, &["2/(4*pi-1)", "-(2+sin(t))"], &[&["0", "0"], &["0", "0"]]).unwrap();
        for g in compute_gamma_beta(&zero, &grid()) {
            assert_eq!((g.gamma, g.gamma_tilde, g.beta), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn b2_allows_large_reflection() {
        let gb = GammaBeta { gamma: 1.0, gamma_tilde: 1.0, beta: 0.0, inf_b: 1.0, sup_b: 1.0 };
        assert!(!check_b1(&gb, 2.0).pass);
        let b2 = check_b2(&[gb], &[2.0]);
        assert!(b2[0].pass);
        assert!((b2[0].decay_lhs - 2.0 * libm::exp(-1.0)).abs() < 1e-15);
        assert_eq!(b2[0].composite_lhs, 0.0);
    }

    #[test]
    fn b1_branches() {
        let pos = GammaBeta { gamma: 1.0, gamma_tilde: 1.0, beta: 0.5, inf_b: 1.0, sup_b: 1.0 };
        assert_eq!(check_b1(&pos, 0.5).class, SignClass::Positive);
        assert!((check_b1(&pos, 0.5).lhs - (0.5 + 0.5 * (1.0 - libm::exp(-1.0)))).abs() < 1e-15);
        let neg = GammaBeta { gamma: -1.0, gamma_tilde: 1.0, beta: 0.0, inf_b: -1.0, sup_b: -1.0 };
        assert!((check_b1(&neg, 0.3).lhs - 0.3 * libm::exp(1.0)).abs() < 1e-15);
        let zero = GammaBeta { gamma: 0.0, gamma_tilde: 0.0, beta: 0.1, inf_b: 0.0, sup_b: 0.0 };
        assert!((check_b1(&zero, 0.8).lhs - 0.9).abs() < 1e-15);
    }

    #[test]
    fn b3_for_definite_diagonal() {
        let sys = DiagonalSystem::parse(1, &["1", "-1"], &[&["1", "0"], &["0", "-1"]]).unwrap();
        let r = condition_report(&sys, &BoundaryOperatorSpec::Periodic { n: 2 }, &grid(), &ConditionOptions::default()).unwrap();
        assert_eq!(r.b3, Some(true));
        assert!(r.rows.iter().all(|x| x.b3.unwrap().lhs == 0.0));
        let z = DiagonalSystem::parse(1, &["1"], &[&["0"]]).unwrap();
        assert!(matches!(check_b3(&compute_gamma_beta(&z, &grid())), Err(ConditionError::B3Inapplicable { row: 1 })));
    }

    #[test]
    fn autonomous_b1_implies_regularity() {
        let sys = DiagonalSystem::parse(1, &["1", "-2"], &[&["0.5", "0.1"], &["0.1", "0.5"]]).unwrap();
        let r = BoundaryOperatorSpec::reflection(&[&["0", "0.5"], &["0.5", "0"]]).unwrap();
        let rep = condition_report(&sys, &r, &grid(), &ConditionOptions::default()).unwrap();
        assert!(rep.b1);
        assert!(rep.c1_regular && rep.c2_regular);
        let ne = rep.norms.unwrap();
        assert_eq!(ne.max[0], ne.max[1]);
        assert_eq!(ne.max[1], ne.max[2]);
        assert!(ne.max[0] <= rep.rows.iter().map(|x| x.r_norm * libm::exp(-x.gamma)).fold(0.0, f64::max) + 1e-12);
    }
}
