//! Small numerical helpers shared across modules.

/// `(1 - exp(-g)) / g`, continuous at `g = 0`.
pub fn phi(g: f64) -> f64 {
    if g.abs() < 1e-12 {
        1.0 - 0.5 * g
    } else {
        -libm::expm1(-g) / g
    }
}

/// Lagrange weights of the four-point stencil at nodes `-1, 0, 1, 2`
/// evaluated at offset `s` from node `0`.
#[inline]
pub fn cubic_weights(s: f64) -> [f64; 4] {
    let sm1 = s - 1.0;
    let sm2 = s - 2.0;
    let sp1 = s + 1.0;
    [-s * sm1 * sm2 / 6.0, sp1 * sm1 * sm2 / 2.0, -sp1 * s * sm2 / 2.0, sp1 * s * sm1 / 6.0]
}

/// Lagrange weights of a four-point stencil at integer nodes `0..4`
/// evaluated at position `s` (used near window edges).
#[inline]
pub fn cubic_weights_at(s: f64) -> [f64; 4] {
    cubic_weights(s - 1.0)
}

/// Solves `a x = b` for `n x n` row-major `a` and `n x r` row-major `b` by
/// Gaussian elimination with partial pivoting. Returns the determinant of
/// `a`; `b` is overwritten with the solution. A zero pivot yields
/// determinant `0` and leaves `b` unspecified.
pub fn gauss_solve(n: usize, a: &mut [f64], b: &mut [f64], r: usize) -> f64 {
    let mut det = 1.0;
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for row in col + 1..n {
            let v = a[row * n + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            for c in 0..r {
                b.swap(col * r + c, piv * r + c);
            }
            det = -det;
        }
        let p = a[col * n + col];
        det *= p;
        for row in col + 1..n {
            let f = a[row * n + col] / p;
            if f != 0.0 {
                for c in col..n {
                    a[row * n + c] -= f * a[col * n + c];
                }
                for c in 0..r {
                    b[row * r + c] -= f * b[col * r + c];
                }
            }
        }
    }
    for col in (0..n).rev() {
        let p = a[col * n + col];
        for c in 0..r {
            let mut s = b[col * r + c];
            for k in col + 1..n {
                s -= a[col * n + k] * b[k * r + c];
            }
            b[col * r + c] = s / p;
        }
    }
    det
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_limits() {
        assert!((phi(0.0) - 1.0).abs() < 1e-15);
        assert!((phi(1.0) - (1.0 - libm::exp(-1.0))).abs() < 1e-15);
        assert!((phi(-1.0) - (libm::exp(1.0) - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn cubic_reproduces_cubics() {
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x - 0.25 * x * x * x;
        for s in [0.0, 0.3, 0.77, 1.0] {
            let w = cubic_weights(s);
            let v: f64 = (0..4).map(|i| w[i] * f(i as f64 - 1.0)).sum();
            assert!((v - f(s)).abs() < 1e-13);
        }
        let w = cubic_weights(0.0);
        assert_eq!(w[1], 1.0);
    }

    #[test]
    fn gauss_solves_and_reports_det() {
        let mut a = [0.0, 2.0, 1.0, 1.0];
        let mut b = [4.0, 3.0];
        let det = gauss_solve(2, &mut a, &mut b, 1);
        assert!((det + 2.0).abs() < 1e-15);
        assert!((b[0] - 1.0).abs() < 1e-15 && (b[1] - 2.0).abs() < 1e-15);
    }
}
