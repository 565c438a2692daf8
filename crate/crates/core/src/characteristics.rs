//! Characteristic curves `dω/dξ = 1 / a_j(ξ, ω)`, `ω(x) = t`, and the
//! weights carried along them.
//!
//! Weights for a curve anchored at `(x, t)`:
//!
//! * `c_j^l(ξ) = exp ∫_x^ξ [b_jj / a_j - l a_jt / a_j²] dη`
//! * `d_j(ξ) = c_j(ξ) / a_j(ξ, ω(ξ))`
//! * `∂_t ω_j(ξ) = exp ∫_ξ^x a_jt / a_j² dη`
//!
//! so that `c^l = c · (∂_t ω)^l`. Integration is fixed-step RK4; weight
//! integrals use the composite trapezoid rule on the RK4 nodes.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::Coefficients;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CharError {
    #[error("characteristic step failure in family {family}: a = {a:e} at (xi, omega) = ({xi:.6}, {omega:.6})")]
    StepFailure { family: usize, xi: f64, omega: f64, a: f64 },
}

/// Boundary abscissa where the backward characteristic of family `j` exits.
#[inline]
pub fn exit_abscissa(j: usize, m: usize) -> f64 {
    if j < m {
        0.0
    } else {
        1.0
    }
}

/// Integrals accumulated over one traced segment `[x0, x1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    /// `ω(x1, x0, t0)`.
    pub omega: f64,
    /// `∫_{x0}^{x1} b_jj / a_j dη`.
    pub int_b: f64,
    /// `∫_{x0}^{x1} a_jt / a_j² dη`.
    pub int_at: f64,
    /// `a_j` at the start and the end of the segment.
    pub a0: f64,
    pub a1: f64,
}

#[inline]
fn checked_a(c: &dyn Coefficients, j: usize, sign: f64, xi: f64, omega: f64) -> Result<f64, CharError> {
    let a = c.a(j, xi, omega);
    if a * sign > 0.0 && a.is_finite() {
        Ok(a)
    } else {
        Err(CharError::StepFailure { family: j, xi, omega, a })
    }
}

#[inline]
fn checked_rates(c: &dyn Coefficients, j: usize, sign: f64, xi: f64, omega: f64) -> Result<(f64, f64, f64), CharError> {
    let (a, b, at) = c.rates(j, xi, omega);
    if a * sign > 0.0 && a.is_finite() {
        Ok((a, b, at))
    } else {
        Err(CharError::StepFailure { family: j, xi, omega, a })
    }
}

/// Traces one segment with `steps` RK4 steps, calling `visit` on every node
/// `(ξ, ω, a, ∫b/a, ∫a_t/a²)` including both ends.
pub fn segment_with(
    c: &dyn Coefficients,
    j: usize,
    x0: f64,
    t0: f64,
    x1: f64,
    steps: usize,
    mut visit: impl FnMut(f64, f64, f64, f64, f64),
) -> Result<Segment, CharError> {
    let sign = if j < c.m() { 1.0 } else { -1.0 };
    let steps = steps.max(1);
    let len = x1 - x0;
    let h = len / steps as f64;
    let mut omega = t0;
    let mut xi = x0;
    let (a_start, b_start, at_start) = checked_rates(c, j, sign, xi, omega)?;
    let mut a = a_start;
    let mut fb = b_start / a;
    let mut fa = at_start / (a * a);
    let mut int_b = 0.0;
    let mut int_at = 0.0;
    visit(xi, omega, a, 0.0, 0.0);
    for s in 0..steps {
        let k1 = 1.0 / a;
        let xm = xi + 0.5 * h;
        let k2 = 1.0 / checked_a(c, j, sign, xm, omega + 0.5 * h * k1)?;
        let k3 = 1.0 / checked_a(c, j, sign, xm, omega + 0.5 * h * k2)?;
        let xn = if s + 1 == steps { x1 } else { x0 + len * ((s + 1) as f64 / steps as f64) };
        let k4 = 1.0 / checked_a(c, j, sign, xn, omega + h * k3)?;
        omega += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        xi = xn;
        let (an, bn, atn) = checked_rates(c, j, sign, xi, omega)?;
        let fbn = bn / an;
        let fan = atn / (an * an);
        int_b += 0.5 * h * (fb + fbn);
        int_at += 0.5 * h * (fa + fan);
        a = an;
        fb = fbn;
        fa = fan;
        visit(xi, omega, a, int_b, int_at);
    }
    Ok(Segment { omega, int_b, int_at, a0: a_start, a1: a })
}

/// [`segment_with`] without a visitor.
#[inline]
pub fn segment(c: &dyn Coefficients, j: usize, x0: f64, t0: f64, x1: f64, steps: usize) -> Result<Segment, CharError> {
    segment_with(c, j, x0, t0, x1, steps, |_, _, _, _, _| {})
}

/// Number of RK4 steps for a trace of length `len` at step `1 / (oversample nx)`.
#[inline]
pub fn steps_for(len: f64, nx: usize, oversample: usize) -> usize {
    let n = libm::ceil(len.abs() * (oversample * nx) as f64 - 1e-9);
    (n as usize).max(1)
}

/// A sampled characteristic with its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Characteristic {
    pub family: usize,
    pub x: f64,
    pub t: f64,
    pub xi: Vec<f64>,
    pub omega: Vec<f64>,
    /// `c^0, c^1, c^2` at the samples.
    pub c: [Vec<f64>; 3],
    pub d: Vec<f64>,
    pub dt_omega: Vec<f64>,
}

impl Characteristic {
    pub fn end_omega(&self) -> f64 {
        *self.omega.last().expect("at least one sample")
    }

    pub fn end_c(&self, l: usize) -> f64 {
        *self.c[l].last().expect("at least one sample")
    }

    pub fn end_dt_omega(&self) -> f64 {
        *self.dt_omega.last().expect("at least one sample")
    }
}

/// Traces family `j` from `(x, t)` to abscissa `xi_end` with step
/// `1 / (oversample nx)` and records all weights.
pub fn trace_to(
    c: &dyn Coefficients,
    j: usize,
    x: f64,
    t: f64,
    xi_end: f64,
    nx: usize,
    oversample: usize,
) -> Result<Characteristic, CharError> {
    let steps = steps_for(xi_end - x, nx, oversample);
    let mut ch = Characteristic {
        family: j,
        x,
        t,
        xi: Vec::with_capacity(steps + 1),
        omega: Vec::with_capacity(steps + 1),
        c: [Vec::with_capacity(steps + 1), Vec::with_capacity(steps + 1), Vec::with_capacity(steps + 1)],
        d: Vec::with_capacity(steps + 1),
        dt_omega: Vec::with_capacity(steps + 1),
    };
    if xi_end == x {
        ch.xi.push(x);
        ch.omega.push(t);
        let a = c.a(j, x, t);
        for l in 0..3 {
            ch.c[l].push(1.0);
        }
        ch.d.push(1.0 / a);
        ch.dt_omega.push(1.0);
        return Ok(ch);
    }
    segment_with(c, j, x, t, xi_end, steps, |xi, om, a, ib, ia| {
        ch.xi.push(xi);
        ch.omega.push(om);
        let c0 = libm::exp(ib);
        ch.c[0].push(c0);
        ch.c[1].push(libm::exp(ib - ia));
        ch.c[2].push(libm::exp(ib - 2.0 * ia));
        ch.d.push(c0 / a);
        ch.dt_omega.push(libm::exp(-ia));
    })?;
    Ok(ch)
}

/// Traces family `j` from `(x, t)` backward to its exit abscissa.
pub fn trace(c: &dyn Coefficients, j: usize, x: f64, t: f64, nx: usize, oversample: usize) -> Result<Characteristic, CharError> {
    trace_to(c, j, x, t, exit_abscissa(j, c.m()), nx, oversample)
}

/// `∂_t ω_j(ξ, x, t)` by quadrature along the traced curve.
pub fn dt_omega(c: &dyn Coefficients, j: usize, xi: f64, x: f64, t: f64, nx: usize, oversample: usize) -> Result<f64, CharError> {
    if xi == x {
        return Ok(1.0);
    }
    let s = segment(c, j, x, t, xi, steps_for(xi - x, nx, oversample))?;
    Ok(libm::exp(-s.int_at))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::DiagonalSystem;

    fn cx() -> DiagonalSystem {
        DiagonalSystem::parse(1, &["2/(4*pi-1)", "-(2+sin(t))"], &[&["0", "0"], &["0", "0"]]).unwrap()
    }

    #[test]
    fn unit_speed_is_a_shift() {
        let sys = DiagonalSystem::parse(1, &["1"], &[&["0"]]).unwrap();
        let ch = trace(&sys, 0, 0.7, 1.3, 64, 4).unwrap();
        for (xi, om) in ch.xi.iter().zip(&ch.omega) {
            assert!((om - (1.3 + xi - 0.7)).abs() < 1e-12);
        }
        assert_eq!(ch.omega[0], 1.3);
        assert_eq!(ch.c[0][0], 1.0);
    }

    #[test]
    fn first_family_is_linear() {
        let sys = cx();
        let k = (4.0 * core::f64::consts::PI - 1.0) / 2.0;
        let ch = trace(&sys, 0, 0.6, 2.0, 256, 4).unwrap();
        for (xi, om) in ch.xi.iter().zip(&ch.omega) {
            assert!((om - (k * (xi - 0.6) + 2.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn second_family_exit_and_amplification() {
        let sys = cx();
        let ch = trace(&sys, 1, 0.0, 0.25, 256, 4).unwrap();
        assert!((ch.end_omega() + 0.25).abs() < 1e-8);
        let s = libm::sin(0.25);
        let kappa = (2.0 + s) / (2.0 - s);
        assert!((ch.end_dt_omega() - kappa).abs() < 1e-6);
        let dw = dt_omega(&sys, 1, 1.0, 0.0, 0.25, 256, 4).unwrap();
        assert!((dw - kappa).abs() < 1e-6);
    }

    #[test]
    fn autonomous_dt_omega_is_one() {
        let sys = DiagonalSystem::parse(1, &["1+x*x", "-2"], &[&["0.3", "0"], &["0", "1"]]).unwrap();
        assert_eq!(dt_omega(&sys, 0, 0.0, 0.8, 0.4, 32, 4).unwrap(), 1.0);
        assert_eq!(dt_omega(&sys, 1, 1.0, 0.2, 0.4, 32, 4).unwrap(), 1.0);
    }

    #[test]
    fn sign_violation_is_step_failure() {
        let sys = DiagonalSystem::parse(1, &["sin(t)"], &[&["0"]]).unwrap();
        assert!(matches!(trace(&sys, 0, 1.0, 0.1, 16, 4), Err(CharError::StepFailure { .. })));
    }
}
