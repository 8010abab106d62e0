//! Reference eigenvalue routes that share no code with the QR solver.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::{DenseMatrix, EigenSet, LinalgError};

/// Largest order accepted by [`oracle_charpoly_eigs`]; polynomial roots lose
/// accuracy quickly beyond it.
pub const ORACLE_MAX_ORDER: usize = 16;

const ROOT_TOL: f64 = 1e-13;
// extra sweeps after the step size drops below ROOT_TOL
const POLISH_SWEEPS: usize = 4;
const ROOT_MAX_ITER: usize = 20_000;

/// Characteristic polynomial coefficients of `det(xI - m)` by the
/// Faddeev-LeVerrier recursion, lowest degree first (`c[n] == 1`).
pub fn charpoly(m: &DenseMatrix) -> Result<Vec<f64>, LinalgError> {
    let n = m.require_square()?;
    let mut c = vec![0.0; n + 1];
    c[n] = 1.0;
    // mk holds M_k; M_0 = 0, M_k = A M_{k-1} + c_{n-k+1} I
    let mut mk = vec![0.0; n * n];
    let a = m.as_slice();
    for k in 1..=n {
        let mut next = vec![0.0; n * n];
        for i in 0..n {
            for l in 0..n {
                let ail = a[i * n + l];
                if ail == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i * n + j] += ail * mk[l * n + j];
                }
            }
            next[i * n + i] += c[n - k + 1];
        }
        // tr(A M_k)
        let mut tr = 0.0;
        for i in 0..n {
            for l in 0..n {
                tr += a[i * n + l] * next[l * n + i];
            }
        }
        c[n - k] = -tr / k as f64;
        mk = next;
    }
    Ok(c)
}

fn horner(c: &[f64], z: Complex64) -> Complex64 {
    c.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &ck| acc * z + ck)
}

// Magnitude scale of the rounding error committed by `horner` at `z`.
fn horner_noise(c: &[f64], z: Complex64) -> f64 {
    let r = z.norm();
    let bound = c.iter().rev().fold(0.0, |acc, &ck| acc * r + ck.abs());
    4.0 * c.len() as f64 * f64::EPSILON * bound
}

/// All roots of a monic polynomial (lowest degree first) by Durand-Kerner
/// simultaneous iteration.
pub fn durand_kerner(c: &[f64]) -> Result<Vec<Complex64>, LinalgError> {
    let n = c.len() - 1;
    debug_assert_eq!(c[n], 1.0);
    if n == 0 {
        return Ok(Vec::new());
    }
    // Fujiwara bound on root moduli
    let bound = (1..=n)
        .map(|k| {
            let coef = c[n - k].abs();
            if k == n {
                (coef / 2.0).powf(1.0 / k as f64)
            } else {
                coef.powf(1.0 / k as f64)
            }
        })
        .fold(0.0f64, f64::max)
        * 2.0;
    let radius = if bound > 0.0 { bound } else { 1.0 };
    let mut z: Vec<Complex64> = (0..n)
        .map(|k| Complex64::from_polar(radius, 2.0 * PI * k as f64 / n as f64 + 0.4))
        .collect();

    let mut polish = None;
    for _ in 0..ROOT_MAX_ITER {
        let mut worst = 0.0f64;
        let mut at_noise_floor = true;
        for i in 0..n {
            let zi = z[i];
            let denom = z
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .fold(Complex64::new(1.0, 0.0), |acc, (_, zj)| acc * (zi - zj));
            let value = horner(c, zi);
            at_noise_floor &= value.norm() <= horner_noise(c, zi);
            let step = if denom.norm() == 0.0 {
                // coincident iterates: nudge apart
                Complex64::new(ROOT_TOL * (1.0 + zi.norm()), ROOT_TOL)
            } else {
                value / denom
            };
            z[i] = zi - step;
            worst = worst.max(step.norm() / (1.0 + z[i].norm()));
        }
        match polish.as_mut() {
            Some(0) => return Ok(z),
            Some(left) => *left -= 1,
            None if worst <= ROOT_TOL || at_noise_floor => polish = Some(POLISH_SWEEPS),
            None => {}
        }
    }
    Err(LinalgError::NoConvergence(ROOT_MAX_ITER))
}

/// Eigenvalues as the roots of the characteristic polynomial.
pub fn oracle_charpoly_eigs(m: &DenseMatrix) -> Result<EigenSet, LinalgError> {
    let n = m.require_square()?;
    if n > ORACLE_MAX_ORDER {
        return Err(LinalgError::OrderTooLarge(n));
    }
    let c = charpoly(m)?;
    Ok(EigenSet::new(durand_kerner(&c)?))
}

/// Closed-form spectrum of the order-`n` tridiagonal Toeplitz matrix
/// `diag + 2 sqrt(sup * sub) cos(k pi / (n + 1))`, `k = 1..=n`.
pub fn toeplitz_tridiag_eigs(n: usize, diag: f64, sup: f64, sub: f64) -> Result<EigenSet, LinalgError> {
    if n == 0 {
        return Err(LinalgError::EmptyOrder);
    }
    let prod = sup * sub;
    let root = if prod >= 0.0 {
        Complex64::new(prod.sqrt(), 0.0)
    } else {
        Complex64::new(0.0, (-prod).sqrt())
    };
    Ok(EigenSet::new(
        (1..=n)
            .map(|k| diag + root * (2.0 * (k as f64 * PI / (n as f64 + 1.0)).cos()))
            .collect(),
    ))
}
